"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, keys are namespaced
(``train.lr``, ``sdt.cap_mm``...). Unknown or repeated keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from .errors import ConfigError


def _triple(cast):
    def parse(text: str):
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError("expected three comma-separated values")
        return tuple(cast(p) for p in parts)
    return parse


def _counts(text: str) -> Dict[str, int]:
    out = {}
    for item in text.split(","):
        name, _, n = item.partition(":")
        if not name.strip() or not n.strip():
            raise ValueError("expected NAME:COUNT pairs")
        out[name.strip()] = int(n)
    return out


def _names(text: str) -> Tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _choice(*options):
    def parse(text: str):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _render(value) -> str:
    if isinstance(value, dict):
        return ",".join(f"{k}:{v}" for k, v in value.items())
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
SCHEMA: Dict[str, Tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    "phantom.dims": (_triple(int), (32, 64, 64)),
    "phantom.spacing": (_triple(float), (1.0, 1.0, 1.0)),
    "phantom.counts": (_counts, {"A": 20, "B": 20, "C": 20}),
    "net.levels": (int, 2),
    "net.base_channels": (int, 8),
    "net.res_blocks": (int, 1),
    "net.dropout": (float, 0.1),
    "net.head_channels": (int, 8),
    "net.proj_dim": (int, 16),
    "net.dist_scale": (float, 10.0),
    "train.lr": (float, 1e-4),
    "train.max_iter": (int, 200),
    "train.epochs": (int, 0),
    "train.batch_size": (int, 1),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.adam_eps": (float, 1e-8),
    "train.lr_mode": (_choice("compound", "poly"), "compound"),
    "train.arm": (_choice("bl", "idr", "dtl", "dsl", "full"), "full"),
    "train.target": (_choice("lesion", "organ"), "lesion"),
    "train.domains": (_names, ()),
    "train.patch": (_triple(int), (16, 32, 32)),
    "train.fg_prob": (float, 0.7),
    "aug.p_rotate": (float, 0.5),
    "aug.p_mirror": (float, 0.5),
    "aug.p_noise": (float, 0.5),
    "aug.max_angle": (float, 15.0),
    "aug.noise_frac": (float, 0.05),
    "aug.tau": (float, 0.1),
    "sdt.cap_mm": (float, 30.0),
    "sdt.k": (float, 4.0),
    "contrast.B": (int, 4),
    "contrast.erosion": (int, 1),
    "contrast.ring": (int, 3),
    "pipeline.threshold": (float, 0.5),
    "pipeline.margin": (int, 8),
    "pipeline.coarse_factor": (int, 2),
    "pipeline.patch": (_triple(int), (16, 32, 32)),
    "pipeline.overlap": (float, 0.5),
    "pipeline.connectivity": (int, 26),
    "pipeline.manifest": (str, ""),
    "pipeline.organ_coarse": (str, ""),
    "pipeline.organ_fine": (str, ""),
    "pipeline.lesion_coarse": (str, ""),
    "pipeline.lesion_fine": (str, ""),
    "experiment.train_domains": (_names, ("A", "B")),
    "experiment.test_domain": (str, "C"),
    "experiment.seeds": (int, 5),
    "experiment.arms": (_names, ("bl", "full")),
}


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]
    explicit: Tuple[str, ...] = ()

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values.get(key, SCHEMA[key][1])

    def get(self, key: str, default=None):
        return self[key] if key in SCHEMA else default

    def section(self, prefix: str) -> Dict[str, Any]:
        """All keys under ``prefix.`` (defaults included), with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: self[k] for k in SCHEMA if k.startswith(p)}

    def with_overrides(self, **overrides) -> "RunConfig":
        vals = dict(self.values)
        for key, value in overrides.items():
            key = key.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = value
        return RunConfig(vals, tuple(sorted(set(self.explicit) | set(vals))))

    def echo(self) -> str:
        """Canonical text of the explicitly set keys (sorted, no comments)."""
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in sorted(self.explicit))


def parse_config(text: str) -> RunConfig:
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return RunConfig(values, tuple(sorted(values)))


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig({})
    return parse_config(Path(path).read_text(encoding="utf-8"))
