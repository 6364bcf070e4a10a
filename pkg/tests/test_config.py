import pytest

from dualseg.config import SCHEMA, RunConfig, load_config, parse_config
from dualseg.errors import ConfigError
from dualseg.nn.network import NetworkConfig
from dualseg.pipeline import PipelineConfig
from dualseg.trainer import TrainConfig, network_config

TEXT = """
# desk run
seed = 3
train.lr = 0.006   # higher than the default
train.patch = 16, 24, 24
train.lr_mode = poly
phantom.counts = A:2, B:2
experiment.arms = bl, full
"""


def test_parse_values_and_defaults():
    rc = parse_config(TEXT)
    assert rc["seed"] == 3 and rc["train.lr"] == 0.006
    assert rc["train.patch"] == (16, 24, 24)
    assert rc["phantom.counts"] == {"A": 2, "B": 2}
    assert rc["experiment.arms"] == ("bl", "full")
    assert rc["sdt.cap_mm"] == 30.0
    assert rc.get("nope", 1) == 1


def test_echo_roundtrip_is_identity():
    rc = parse_config(TEXT)
    again = parse_config(rc.echo())
    assert again.echo() == rc.echo()
    assert dict(again.values) == dict(rc.values)


@pytest.mark.parametrize("text", ["bogus = 1", "seed = 1\nseed = 2", "seed", "seed = x",
                                  "train.patch = 1,2", "train.arm = ours", "phantom.counts = A"])
def test_rejects_bad_text(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_unknown_key_lookup():
    with pytest.raises(ConfigError):
        RunConfig({})["nope"]
    with pytest.raises(ConfigError):
        RunConfig({}).with_overrides(nope=1)


def test_overrides_and_sections():
    rc = RunConfig({}).with_overrides(train__lr=0.5, seed=9)
    assert rc["train.lr"] == 0.5 and "train.lr" in rc.explicit
    assert set(rc.section("pipeline")) >= {"threshold", "margin", "overlap"}


def test_load_config(tmp_path):
    assert load_config(None).echo() == ""
    p = tmp_path / "run.cfg"
    p.write_text(TEXT, encoding="utf-8")
    assert load_config(str(p))["train.lr_mode"] == "poly"


def test_every_default_parses_from_its_rendering():
    rc = RunConfig({k: d for k, (_, d) in SCHEMA.items()}, tuple(sorted(SCHEMA)))
    again = parse_config(rc.echo())
    for k in SCHEMA:
        assert again[k] == rc[k], k


def test_typed_configs_from_run_config():
    rc = parse_config(TEXT)
    tc = TrainConfig.from_run_config(rc, arm="bl")
    assert tc.lr == 0.006 and tc.seed == 3 and tc.arm == "bl" and tc.patch == (16, 24, 24)
    nc = network_config(rc)
    assert isinstance(nc, NetworkConfig) and nc.seed == 3
    assert PipelineConfig.from_run_config(rc).threshold == 0.5
