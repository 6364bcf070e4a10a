import numpy as np
import pytest
from hypothesis import given, strategies as st

from dualseg.errors import InvalidMix
from dualseg.grid import Mask, Volume
from dualseg.texaug import (GeometricPlan, RandKernel, apply_plan, geometric_augment, geometric_plan, make_pair,
                            perturb, rotate_inplane, sample_kernel)


@pytest.fixture
def x(rng):
    return Volume(rng.random((6, 8, 8)), (2.0, 1.0, 1.0))


def test_sample_kernel_deterministic():
    a, b = sample_kernel(5), sample_kernel(5)
    assert a.size == b.size and np.array_equal(a.weights, b.weights)


def test_kernel_sizes_cover_all_options():
    assert {sample_kernel(s).size for s in range(200)} == {1, 3, 5, 7}


def test_weight_variance_at_k3():
    rng = np.random.default_rng(0)
    w = []
    while len(w) < 10_000:
        k = sample_kernel(rng)
        if k.size == 3:
            w.extend(k.weights.ravel())
    assert np.var(w[:10_000]) == pytest.approx(1 / 27, rel=0.1)


@given(st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_zero_mix_is_bit_identity(a, seed):
    x = Volume(np.random.default_rng(seed).random((4, 5, 6)))
    k = sample_kernel(seed)
    assert np.array_equal(perturb(x, k, 0.0).data, x.data)
    assert np.array_equal(perturb(x, RandKernel.dirac(3), a).data, x.data)


def test_size_one_kernel_is_global_scaling(x):
    # a=1 scales by w; renormalisation then restores the range for w > 0 and flips it for w < 0
    pos = perturb(x, RandKernel(1, np.full((1, 1, 1), 2.5)), 1.0)
    assert np.allclose(pos.data, x.data)
    neg = perturb(x, RandKernel(1, np.full((1, 1, 1), -1.0)), 1.0).data
    lo, hi = x.data.min(), x.data.max()
    assert np.allclose(neg, lo + hi - x.data)


def test_constant_result_maps_to_midpoint():
    x = Volume(np.array([0.0, 1.0, 0.0]).reshape(1, 1, 3))
    k = np.zeros((3, 3, 3))
    k[1, 1, :] = 1.0   # [1, 1, 1] along x
    out = perturb(x, RandKernel(3, k), 1.0).data.ravel()
    assert out.tolist() == [0.5, 0.5, 0.5]


def test_perturb_rejects_bad_mix(x):
    with pytest.raises(InvalidMix):
        perturb(x, RandKernel.dirac(), 1.5)


def test_perturb_stays_in_range(x):
    for s in range(20):
        out = perturb(x, sample_kernel(s), 0.7).data
        assert out.min() >= x.data.min() and out.max() <= x.data.max()


def test_make_pair_structure(x):
    y = Mask((x.data > 0.5).astype(np.uint8), x.spacing)
    p = make_pair(x, 11, label=y)
    assert p.x_phi.dims == p.x_varphi.dims == x.dims
    assert p.x_phi.spacing == p.x_varphi.spacing == x.spacing
    assert p.label is y
    assert 0.0 <= p.a_phi <= 1.0 and 0.0 <= p.a_varphi <= 1.0
    q = make_pair(x, 11)
    assert np.array_equal(p.x_phi.data, q.x_phi.data) and np.array_equal(p.x_varphi.data, q.x_varphi.data)


def test_make_pair_branches_differ(x):
    assert sum(not np.array_equal(make_pair(x, s).x_phi.data, make_pair(x, s).x_varphi.data)
               for s in range(100)) >= 95


def test_make_pair_does_not_consume_seed_sequence(x):
    ss = np.random.SeedSequence(3)
    assert np.array_equal(make_pair(x, ss).x_phi.data, make_pair(x, ss).x_phi.data)


def test_noop_plan(x):
    y = Mask(np.zeros(x.dims, np.uint8))
    plan = geometric_plan(0, 0.0, 0.0, 0.0)
    assert plan.is_noop
    x2, y2 = apply_plan(x, y, plan)
    assert np.array_equal(x2.data, x.data) and y2 == y


def test_double_mirror_restores(x):
    y = Mask((x.data > 0.4).astype(np.uint8), x.spacing)
    plan = GeometricPlan(mirror_axis=2)
    x2, y2 = apply_plan(*apply_plan(x, y, plan), plan)
    assert np.array_equal(x2.data, x.data) and y2 == y


def test_rotation_roundtrip_smooth_volume():
    zz, yy, xx = np.mgrid[0:4, 0:32, 0:32]
    x = Volume(np.sin(yy / 6.0) + np.cos(xx / 7.0))
    back, _ = rotate_inplane(rotate_inplane(x, None, 12.0)[0], None, -12.0)
    inner = (slice(None), slice(8, 24), slice(8, 24))
    span = x.data.max() - x.data.min()
    assert np.max(np.abs(back.data[inner] - x.data[inner])) < 1e-2 * span


def test_geometric_augment_keeps_mask_binary_and_dims(x):
    y = Mask((x.data > 0.5).astype(np.uint8), x.spacing)
    for s in range(10):
        x2, y2 = geometric_augment(x, y, s, p_rotate=1.0)
        assert x2.dims == x.dims and y2.dims == y.dims
        assert set(np.unique(y2.data)) <= {0, 1}


def test_noise_only_touches_image_and_scales_with_range(x):
    y = Mask((x.data > 0.5).astype(np.uint8), x.spacing)
    plan = GeometricPlan(noise_seed=4)
    x2, y2 = apply_plan(x, y, plan, 0.05)
    assert y2 == y
    sigma = np.std(x2.data - x.data)
    assert sigma == pytest.approx(0.05 * (x.data.max() - x.data.min()), rel=0.25)
    x3, _ = geometric_augment(x, y, 0, noise_frac=0.0, p_rotate=0.0, p_mirror=0.0, p_noise=1.0)
    assert np.array_equal(x3.data, x.data)
