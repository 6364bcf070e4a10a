"""Central finite-difference checks for every loss and for the network end to end.

Loss checks compare the analytic directional derivative along a random unit
direction with ``(L(x + h v) - L(x - h v)) / 2h`` at many random points. The
network check perturbs individual parameters of the tiny configuration.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .nn.network import TINY, Network, NetworkConfig
from .objective import (BranchOutputs, consistency_loss, contrastive_loss, dice_bce, dist_loss, seg_loss,
                        total_loss, tran_loss)
from .sampling import cell_classes, draw_samples
from .sdt import signed_distance_map
from .grid import Mask

STEP = 1e-5
LOSS_TOL = 1e-4
NET_TOL = 5e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    points: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_check(f: Callable[[np.ndarray], float], x: np.ndarray, grad: np.ndarray,
                      v: np.ndarray, h: float = STEP) -> float:
    analytic = float(np.sum(grad * v))
    numeric = (f(x + h * v) - f(x - h * v)) / (2.0 * h)
    return rel_error(numeric, analytic)


def _unit(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v)


# Each case builds (f, x, grad_at_x) from an rng; x is a flat vector.

def _pack(outs: List[BranchOutputs], with_features=False):
    """Flatten a branch pair to one vector; returns (vector, unpack, pack_grads)."""
    keys = ("seg_prob", "dist_pred", "slice_prob") + (("features",) if with_features else ())
    layout = [(b, k, getattr(o, k).shape) for b, o in enumerate(outs) for k in keys]

    def unpack(vec):
        arrs, i = {}, 0
        for b, k, s in layout:
            n = int(np.prod(s))
            arrs[b, k] = vec[i:i + n].reshape(s)
            i += n
        return [BranchOutputs(*(arrs[b, k] for k in keys)) for b in range(len(outs))]

    def pack_grads(grads: List[Dict[str, np.ndarray]]):
        return np.concatenate([np.asarray(grads[b].get(k, np.zeros(s)), float).ravel() for b, k, s in layout])

    return np.concatenate([getattr(outs[b], k).ravel() for b, k, _ in layout]), unpack, pack_grads


def _random_pair(rng, dims=(4, 4, 4), feat=None):
    outs = []
    for _ in range(2):
        seg = rng.uniform(0.02, 0.98, dims)
        # |k * dist| stays below ~6 so the soft conversion is not saturated;
        # saturated logistics lose digits in log(1 - p) and swamp the differences
        dist = rng.uniform(-1.5, 1.5, dims)
        sl = rng.uniform(0.02, 0.98, dims[0])
        f = rng.normal(size=feat) if feat else None
        outs.append(BranchOutputs(seg, dist, sl, f))
    return outs


def _random_label(rng, dims=(4, 4, 4)):
    Y = (rng.random(dims) < 0.35).astype(np.float64)
    Y[0, 0, 0] = 1.0
    return Y


def case_dice_bce(rng):
    Y = _random_label(rng)
    x = rng.uniform(0.02, 0.98, Y.shape)
    return (lambda p: dice_bce(p, Y)[0]), x, dice_bce(x, Y)[1]


def case_seg(rng):
    Y = _random_label(rng)
    C = Y.reshape(Y.shape[0], -1).max(axis=1)
    x, unpack, pg = _pack(_random_pair(rng))
    f = lambda v: seg_loss(unpack(v), Y, C)[0]
    return f, x, pg(seg_loss(unpack(x), Y, C)[1])


def _no_ties(rng, M):
    outs = _random_pair(rng)
    for o in outs:  # keep every residual well away from zero
        r = o.dist_pred - M
        o.dist_pred[...] = M + np.where(np.abs(r) < 0.05, 0.05 * np.sign(r + 1e-12) + r, r)
    return outs


def case_dist(rng):
    M = rng.normal(0.0, 3.0, (4, 4, 4))
    x, unpack, pg = _pack(_no_ties(rng, M))
    f = lambda v: dist_loss(unpack(v), M)[0]
    return f, x, pg(dist_loss(unpack(x), M)[1])


def case_tran(rng):
    Y = _random_label(rng)
    x, unpack, pg = _pack(_random_pair(rng))
    f = lambda v: tran_loss(unpack(v), Y)[0]
    return f, x, pg(tran_loss(unpack(x), Y)[1])


def case_contrastive(rng):
    feats = rng.normal(size=(8, 16))
    classes = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    f = lambda v: contrastive_loss(v.reshape(8, 16), classes)[0]
    return f, feats.ravel(), contrastive_loss(feats, classes)[1].ravel()


def case_consistency(rng):
    x, unpack, pg = _pack(_random_pair(rng))
    f = lambda v: consistency_loss(unpack(v))[0]
    return f, x, pg(consistency_loss(unpack(x))[1])


def case_total(rng):
    """All five terms, including contrastive gradients scattered back onto feature maps."""
    dims = (4, 8, 8)
    Y = np.zeros(dims)
    Y[1:4, 2:7, 2:7] = 1.0
    mask = Mask(Y.astype(np.uint8))
    M = signed_distance_map(mask).data
    C = Y.reshape(dims[0], -1).max(axis=1)
    cells = cell_classes(mask, 2, erosion=0, ring=2)
    outs = _random_pair(rng, dims, feat=(5, 2, 4, 4))
    for o in outs:
        r = o.dist_pred - M
        o.dist_pred[...] += np.where(np.abs(r) < 0.05, 0.1, 0.0)
    seed = int(rng.integers(2 ** 31))
    x, unpack, pg = _pack(outs, with_features=True)

    def report(v):
        pair = unpack(v)
        samples = draw_samples([o.features for o in pair], cells, 3, seed)
        return total_loss(pair, Y, M, C, samples, "full")

    return (lambda v: report(v).all), x, pg(report(x).grads)


LOSS_CASES: Dict[str, Callable] = {
    "dice_bce": case_dice_bce,
    "seg": case_seg,
    "dist": case_dist,
    "tran": case_tran,
    "contrastive": case_contrastive,
    "consistency": case_consistency,
    "total": case_total,
}


def check_losses(points: int = 50, seed: int = 0) -> List[CheckResult]:
    results = []
    for i, (name, make) in enumerate(LOSS_CASES.items()):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(points):
            f, x, g = make(rng)
            worst = max(worst, directional_check(f, x, g, _unit(rng, x.shape)))
        results.append(CheckResult(name, worst, points, LOSS_TOL))
    return results


def check_network(n_params: int = 30, seed: int = 0, cfg: NetworkConfig = TINY) -> CheckResult:
    """Finite differences of the full-arm loss through the network, per sampled parameter."""
    cfg = NetworkConfig(**{**cfg.__dict__, "dropout": 0.0, "seed": seed})
    net = Network(cfg).eval()
    rng = np.random.default_rng([seed, 99])
    dims = (4, 8, 8)
    x = rng.random((2,) + dims)
    Y = np.zeros(dims)
    Y[0:4, 2:6, 2:6] = 1.0
    mask = Mask(Y.astype(np.uint8))
    M = signed_distance_map(mask).data
    C = Y.reshape(dims[0], -1).max(axis=1)
    cells = cell_classes(mask, cfg.factor, erosion=0, ring=2)

    def report():
        outs = net.forward_batch(x)
        samples = draw_samples([o.features for o in outs], cells, 2, seed)
        return total_loss(outs, Y, M, C, samples, "full")

    rep = report()
    net.zero_grad()
    net.backward(rep.grads)
    names = list(net.params)
    sizes = np.array([net.params[k].size for k in names])
    flat_choice = rng.choice(int(sizes.sum()), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for j in np.sort(flat_choice):
        li = int(np.searchsorted(offsets, j, side="right") - 1)
        p = net.params[names[li]]
        idx = np.unravel_index(int(j - offsets[li]), p.shape)
        analytic = float(net.grads[names[li]][idx])
        old = p[idx]
        p[idx] = old + STEP
        up = report().all
        p[idx] = old - STEP
        down = report().all
        p[idx] = old
        worst = max(worst, rel_error((up - down) / (2 * STEP), analytic, floor=1e-6))
    return CheckResult("network", worst, n_params, NET_TOL)
