import numpy as np
import pytest
from hypothesis import given, strategies as st

from dualseg.errors import ConfigError
from dualseg.grid import BBox, Mask, Volume
from dualseg.phantom import gen_geometry
from dualseg.pipeline import (STAGE_HEADER, PipelineConfig, binarize, infer_patchwise, run_two_stage,
                              stage_rows)


class Echo:
    """Returns its input as the probability map; exposes the tiling arithmetic."""

    def __init__(self, factor=1):
        self.factor = factor
        self.calls = []

    def predict(self, x):
        assert all(n % self.factor == 0 for n in x.shape)
        self.calls.append(x.shape)
        return x.copy(), -x, x.mean(axis=(1, 2))


class Threshold:
    """Oracle segmenter: foreground wherever the intensity reaches ``level``."""

    def __init__(self, level, factor=1):
        self.level, self.factor = level, factor

    def predict(self, x):
        p = (x >= self.level).astype(np.float64)
        return p, 1.0 - 2.0 * p, p.max(axis=(1, 2))


class Constant:
    def __init__(self, value, factor=1):
        self.value, self.factor = value, factor

    def predict(self, x):
        p = np.full(x.shape, self.value)
        return p, p, np.full(x.shape[0], self.value)


@given(st.tuples(st.integers(3, 13), st.integers(3, 13), st.integers(3, 13)),
       st.tuples(st.integers(2, 8), st.integers(2, 8), st.integers(2, 8)),
       st.sampled_from([0.0, 0.25, 0.5, 0.9]), st.sampled_from([1, 2]))
def test_tiling_reproduces_local_net(dims, patch, overlap, factor):
    x = np.random.default_rng(sum(dims)).random(dims)
    out = infer_patchwise(Echo(factor), x, patch, overlap)
    assert np.allclose(out.seg_prob, x, rtol=0, atol=1e-12)
    assert np.allclose(out.dist_pred, -x, rtol=0, atol=1e-12)
    assert out.slice_prob.shape == (dims[0],)


def test_tile_count_and_single_tile_path():
    net = Echo()
    infer_patchwise(net, np.zeros((8, 8, 8)), (4, 4, 4), 0.5)
    assert len(net.calls) == 27     # starts 0, 2, 4 per axis
    net = Echo()
    infer_patchwise(net, np.zeros((8, 8, 8)), (4, 4, 4), 0.0)
    assert len(net.calls) == 8
    net = Echo()
    infer_patchwise(net, np.zeros((5, 6, 7)), (16, 16, 16), 0.5)
    assert net.calls == [(5, 6, 7)]


def test_bad_overlap_and_threshold():
    with pytest.raises(ConfigError):
        infer_patchwise(Echo(), np.zeros((4, 4, 4)), (2, 2, 2), 0.95)
    with pytest.raises(ConfigError):
        binarize(np.zeros((2, 2, 2)), 1.0)
    with pytest.raises(ConfigError):
        PipelineConfig(threshold=0.0)


def test_binarize_is_inclusive():
    m = binarize(np.array([0.49, 0.5, 0.51]).reshape(1, 1, 3))
    assert m.data.ravel().tolist() == [0, 1, 1]


def clean_case(seed, dims=(32, 48, 48)):
    organ, lesion = gen_geometry(seed, dims)
    vol = Volume(0.5 * organ + 0.5 * lesion)
    return vol, Mask(organ), Mask(lesion)


def oracle_nets(factor=1):
    return Threshold(0.25, factor), Threshold(0.25, factor), Threshold(0.75, factor), Threshold(0.75, factor)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("factor", [1, 2])
def test_seg_mode_reproduces_ground_truth(seed, factor):
    vol, organ, lesion = clean_case(seed)
    res = run_two_stage(vol, *oracle_nets(factor), PipelineConfig(patch=(16, 24, 24)), "seg")
    assert res.organ == organ
    assert res.lesion == lesion
    assert res.warnings == []
    assert [s.name for s in res.stages] == ["organ_coarse", "organ_fine", "lesion_coarse", "lesion_fine"]


def test_mask_mode_reproduces_ground_truth():
    vol, organ, lesion = clean_case(4)
    res = run_two_stage(vol, None, None, *oracle_nets()[2:], PipelineConfig(patch=(16, 24, 24)), "mask", organ)
    assert res.lesion == lesion and res.organ == organ
    assert res.stages[0].name == "organ_mask"


@pytest.mark.parametrize("seed", range(5))
def test_mask_mode_never_leaves_organ_box(seed):
    rng = np.random.default_rng(seed)
    vol = Volume(rng.random((16, 24, 24)))
    organ = np.zeros(vol.dims, np.uint8)
    lo = rng.integers(0, 8, 3)
    organ[lo[0]:lo[0] + 5, lo[1]:lo[1] + 9, lo[2]:lo[2] + 7] = 1
    cfg = PipelineConfig(margin=int(rng.integers(0, 4)), patch=(8, 8, 8))
    res = run_two_stage(vol, None, None, Constant(1.0), Constant(1.0), cfg, "mask", Mask(organ))
    box = res.organ_roi
    outside = np.ones(vol.dims, bool)
    outside[box.slices] = False
    assert res.lesion.count > 0 and not res.lesion.data[outside].any()


def test_empty_results_fall_back_with_warnings():
    vol = Volume(np.zeros((8, 8, 8)))
    res = run_two_stage(vol, *[Constant(0.0)] * 4, PipelineConfig(patch=(8, 8, 8)), "seg")
    assert res.organ_roi == BBox.full(vol.dims) and res.lesion_roi == res.organ_roi
    assert len(res.warnings) == 2 and res.lesion.count == 0
    empty = run_two_stage(vol, None, None, Constant(0.0), Constant(0.0), PipelineConfig(patch=(8, 8, 8)),
                          "mask", Mask(np.zeros((8, 8, 8), np.uint8)))
    assert "empty organ mask" in empty.warnings[0]


def test_mask_mode_needs_mask():
    with pytest.raises(ConfigError):
        run_two_stage(Volume(np.zeros((4, 4, 4))), None, None, Constant(0.0), Constant(0.0), roi_mode="mask")
    with pytest.raises(ConfigError):
        run_two_stage(Volume(np.zeros((4, 4, 4))), None, None, None, None, roi_mode="box")


def test_stage_rows_without_timings():
    vol, organ, _ = clean_case(0)
    res = run_two_stage(vol, *oracle_nets(), PipelineConfig(patch=(16, 24, 24)), "mask", organ)
    rows = stage_rows("C_000", res, timings=False)
    assert len(STAGE_HEADER) == len(rows[0])
    assert all(r[2] == 0.0 for r in rows)
    assert rows[0][3] == " ".join(map(str, res.organ_roi.lo))
