import numpy as np
import pytest

from dualseg.errors import ConfigError, ShapeError, StateError
from dualseg.nn.layers import Conv3d, Dropout, InstanceNorm3d, ReLU, Sigmoid, SliceHead, TrilinearUpsample
from dualseg.nn.network import DESK, LARGE, TINY, Network, NetworkConfig, ResBlock, build, expected_param_count

H = 1e-6


def _dir_check(f, x, analytic, rng):
    v = rng.normal(size=x.shape)
    v /= np.linalg.norm(v)
    num = (f(x + H * v) - f(x - H * v)) / (2 * H)
    ana = float(np.sum(analytic * v))
    return abs(num - ana) / max(abs(num), abs(ana), 1e-8)


def layer_check(layer, x, rng):
    """Relative errors of the input gradient and of every parameter gradient."""
    out = layer.forward(x)
    g = rng.normal(size=out.shape)
    layer.zero_grad()
    gx = layer.backward(g)
    pgrads = {k: v.copy() for k, v in layer.grads.items()}
    errs = [_dir_check(lambda z: float(np.sum(g * layer.forward(z))), x, gx, rng)]
    for name, p in layer.params.items():
        keep = p.copy()

        def f(val, name=name):
            p[...] = val
            return float(np.sum(g * layer.forward(x)))

        errs.append(_dir_check(f, keep, pgrads[name], rng))
        p[...] = keep
    return max(errs)


LAYERS = {
    "conv3": lambda rng: (Conv3d(2, 3, 3, rng=rng), (2, 2, 4, 4, 4)),
    "conv3_stride2": lambda rng: (Conv3d(2, 3, 3, stride=2, rng=rng), (1, 2, 4, 6, 4)),
    "conv1": lambda rng: (Conv3d(3, 2, 1, rng=rng), (2, 3, 2, 3, 4)),
    "instance_norm": lambda rng: (InstanceNorm3d(3), (2, 3, 2, 3, 4)),
    "relu": lambda rng: (ReLU(), (2, 2, 3, 3, 3)),
    "sigmoid": lambda rng: (Sigmoid(), (2, 2, 3, 3, 3)),
    "upsample": lambda rng: (TrilinearUpsample(), (1, 2, 2, 3, 4)),
    "slice_head": lambda rng: (SliceHead(3, rng=rng), (2, 3, 4, 3, 3)),
    "residual": lambda rng: (ResBlock(2, rng), (1, 2, 3, 4, 4)),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_gradients(name):
    rng = np.random.default_rng(sorted(LAYERS).index(name))
    layer, shape = LAYERS[name](rng)
    if isinstance(layer, InstanceNorm3d):
        layer.params["gamma"][...] = rng.normal(size=3)
        layer.params["beta"][...] = rng.normal(size=3)
    assert layer_check(layer, rng.normal(size=shape), rng) < 1e-4


def test_conv_matches_direct_correlation():
    rng = np.random.default_rng(0)
    conv = Conv3d(1, 1, 3, rng=rng)
    x = rng.normal(size=(1, 1, 3, 3, 3))
    out = conv.forward(x)
    w = conv.params["weight"][0, 0]
    assert out[0, 0, 1, 1, 1] == pytest.approx(float(np.sum(w * x[0, 0])), rel=1e-12)


def test_upsample_constant_and_shape():
    up = TrilinearUpsample().forward(np.full((1, 1, 2, 3, 4), 2.5))
    assert up.shape == (1, 1, 4, 6, 8) and np.allclose(up, 2.5)


def test_dropout_modes():
    d = Dropout(0.5, np.random.default_rng(0))
    x = np.ones((1, 1, 4, 4, 4))
    assert d.forward(x, train=False) is x
    y = d.forward(x, train=True)
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert np.array_equal(d.backward(x), y)


def test_backward_before_forward():
    with pytest.raises(StateError):
        Conv3d(1, 1, rng=np.random.default_rng(0)).backward(np.zeros((1, 1, 2, 2, 2)))
    with pytest.raises(StateError):
        Network(TINY).backward([{}])


def test_config_validation():
    for bad in ({"levels": 0}, {"base_channels": 0}, {"dropout": 1.0}, {"dist_scale": 0.0}):
        with pytest.raises(ConfigError):
            NetworkConfig(**bad)


@pytest.mark.parametrize("cfg", [TINY, DESK, LARGE])
def test_param_count_closed_form(cfg):
    assert Network(cfg).n_params == expected_param_count(cfg)


def test_desk_param_count_frozen():
    assert expected_param_count(DESK) == Network(DESK).n_params == 28427


def test_same_seed_identical_params():
    a, b = build(DESK), build(DESK)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build(NetworkConfig(seed=1))
    assert not all(np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_output_shapes():
    net = Network(TINY)
    x = np.random.default_rng(0).random((4, 6, 8))
    out = net.forward(x)
    assert out.seg_prob.shape == out.dist_pred.shape == (4, 6, 8)
    assert out.slice_prob.shape == (4,)
    assert out.features.shape == (TINY.proj_dim, 2, 3, 4)
    assert np.all((out.seg_prob >= 0) & (out.seg_prob <= 1))


def test_bad_dims():
    with pytest.raises(ShapeError):
        Network(TINY).forward(np.zeros((3, 4, 4)))


def test_zero_params_give_half():
    net = Network(TINY)
    for p in net.params.values():
        p[...] = 0.0
    seg, _, sl = net.predict(np.random.default_rng(0).random((4, 4, 4)))
    assert np.all(seg == 0.5) and np.all(sl == 0.5)


def test_eval_forward_deterministic_with_dropout():
    net = Network(NetworkConfig(dropout=0.5, base_channels=2, head_channels=2, proj_dim=2))
    x = np.random.default_rng(1).random((4, 8, 8))
    assert np.array_equal(net.predict(x)[0], net.predict(x)[0])
    net.train()
    assert not np.array_equal(net.forward(x).seg_prob, net.forward(x).seg_prob)


def test_input_scaling_changes_output():
    changed = 0
    for seed in range(20):
        net = Network(NetworkConfig(**{**TINY.__dict__, "seed": seed}))
        x = np.random.default_rng(seed).random((4, 8, 8)) + 0.1
        changed += not np.allclose(net.predict(x)[1], net.predict(2 * x)[1])
    assert changed >= 18


def _grads_for(net, x, gs):
    net.zero_grad()
    net.forward_batch(x)
    net.backward(gs)
    return {k: v.copy() for k, v in net.grads.items()}


def test_zero_output_grads_give_zero_param_grads():
    net = Network(TINY)
    x = np.random.default_rng(0).random((1, 4, 4, 4))
    grads = _grads_for(net, x, [{}])
    assert all(not np.any(g) for g in grads.values())


def test_backward_is_linear_and_accumulates():
    net = Network(TINY)
    rng = np.random.default_rng(0)
    x = rng.random((1, 4, 4, 4))
    g1 = {"seg_prob": rng.normal(size=(4, 4, 4)), "slice_prob": rng.normal(size=4)}
    g2 = {"dist_pred": rng.normal(size=(4, 4, 4)), "features": rng.normal(size=(3, 2, 2, 2))}
    both = {**g1, **g2}
    a = _grads_for(net, x, [g1])
    b = _grads_for(net, x, [g2])
    ab = _grads_for(net, x, [both])
    net.backward([g1])   # second call on the same forward adds on top
    for k in ab:
        assert np.allclose(a[k] + b[k], ab[k], rtol=1e-10, atol=1e-12)
        assert np.allclose(net.grads[k], ab[k] + a[k], rtol=1e-10, atol=1e-12)


def test_batch_items_independent():
    net = Network(TINY)
    x = np.random.default_rng(3).random((2, 4, 4, 4))
    outs = net.forward_batch(x)
    single = net.forward(x[1])
    assert np.allclose(outs[1].seg_prob, single.seg_prob, rtol=1e-12)
