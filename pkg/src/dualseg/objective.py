"""Training losses and their gradients with respect to the network outputs.

Every loss takes plain arrays (or :class:`BranchOutputs` pairs) and returns
the scalar value together with gradients shaped like its inputs. Pair-level
losses return one gradient dict per branch, keyed by output name.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateFeature, ShapeError
from .sdt import logistic

EPS = 1e-7
DEFAULT_STEEPNESS = 4.0
DEFAULT_TAU = 0.1

ARMS = {
    "bl": frozenset({"seg"}),
    "idr": frozenset({"seg", "dis"}),
    "dtl": frozenset({"seg", "dis", "tran"}),
    "dsl": frozenset({"seg", "con", "cos"}),
    "full": frozenset({"seg", "dis", "tran", "con", "cos"}),
}

OUTPUT_KEYS = ("seg_prob", "dist_pred", "slice_prob", "features")


@dataclass(eq=False)
class BranchOutputs:
    """Outputs of one forward pass on one branch input."""

    seg_prob: np.ndarray
    dist_pred: np.ndarray
    slice_prob: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.seg_prob.shape != self.dist_pred.shape:
            raise ShapeError("segmentation and distance outputs differ in shape")
        if self.slice_prob.shape != (self.seg_prob.shape[0],):
            raise ShapeError("slice probabilities must have one entry per z slice")


def zero_grads(out: BranchOutputs) -> Dict[str, np.ndarray]:
    g = {k: np.zeros_like(getattr(out, k)) for k in OUTPUT_KEYS[:3]}
    if out.features is not None:
        g["features"] = np.zeros_like(out.features)
    return g


def _check_same(a, b, what="inputs"):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def dice_bce(pred, target, eps: float = EPS) -> Tuple[float, np.ndarray]:
    """Dice loss plus binary cross-entropy, with the gradient w.r.t. ``pred``.

    ``pred`` is clamped to ``[eps, 1 - eps]`` inside the logarithms only.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same(pred, target)
    n = pred.size
    inter = float(np.sum(target * pred))
    denom = float(np.sum(target)) + float(np.sum(pred)) + eps
    dice = 1.0 - 2.0 * inter / denom
    g_dice = -2.0 * (target * denom - inter) / denom ** 2

    pc = np.clip(pred, eps, 1.0 - eps)
    bce = -float(np.sum(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc))) / n
    inside = (pred > eps) & (pred < 1.0 - eps)
    g_bce = np.where(inside, -(target / pc - (1.0 - target) / (1.0 - pc)) / n, 0.0)
    return dice + bce, g_dice + g_bce


def seg_loss(pair: Sequence[BranchOutputs], Y, C) -> Tuple[float, list]:
    """Per-branch voxel and slice terms, summed over both branches."""
    Y = np.asarray(Y, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    total = 0.0
    grads = []
    for out in pair:
        _check_same(out.seg_prob, Y, "prediction and label")
        lv, gv = dice_bce(out.seg_prob, Y)
        ls, gs = dice_bce(out.slice_prob, C)
        total += lv + ls
        grads.append({"seg_prob": gv, "slice_prob": gs})
    return total, grads


def dist_loss(pair: Sequence[BranchOutputs], M) -> Tuple[float, list]:
    """Mean absolute error of both distance predictions, halved."""
    M = np.asarray(M, dtype=np.float64)
    n = M.size
    total = 0.0
    grads = []
    for out in pair:
        _check_same(out.dist_pred, M, "distance prediction and target")
        r = out.dist_pred - M
        total += float(np.abs(r).sum())
        grads.append({"dist_pred": np.sign(r) / (2.0 * n)})
    return total / (2.0 * n), grads


def tran_loss(pair: Sequence[BranchOutputs], Y, k: float = DEFAULT_STEEPNESS) -> Tuple[float, list]:
    """Combined voxel loss on the soft-converted distance predictions, averaged over branches."""
    Y = np.asarray(Y, dtype=np.float64)
    total = 0.0
    grads = []
    for out in pair:
        _check_same(out.dist_pred, Y, "distance prediction and label")
        soft = logistic(-k * out.dist_pred)
        l, g = dice_bce(soft, Y)
        total += 0.5 * l
        grads.append({"dist_pred": 0.5 * g * (-k) * soft * (1.0 - soft)})
    return total, grads


def cosine_matrix(f):
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0):
        raise DegenerateFeature("zero feature vector")
    u = f / norms[:, None]
    return u, norms, u @ u.T


def info_nce(f_i, f_j, negatives, tau: float = DEFAULT_TAU) -> float:
    """InfoNCE for one anchor/positive pair; the positive is not in the denominator."""
    vecs = np.vstack([f_i, f_j, negatives])
    u, _, sim = cosine_matrix(vecs)
    logits = sim[0, 2:] / tau
    m = logits.max()
    return float(-sim[0, 1] / tau + m + np.log(np.exp(logits - m).sum()))


def contrastive_loss(features, classes, tau: float = DEFAULT_TAU) -> Tuple[float, np.ndarray, bool]:
    """Cross-instance contrastive loss over labelled feature vectors.

    Sums InfoNCE over every unordered same-class pair ``(i, j)``, ``i < j``,
    anchored at ``i`` with all other-class samples as negatives, scaled by
    ``1 / (2 * n_pairs)``. Returns ``(loss, grad, skipped)``; ``skipped`` is
    set (with zero loss) when no same-class pair or no cross-class sample exists.
    """
    f = np.asarray(features, dtype=np.float64)
    cls = np.asarray(classes)
    n = len(f)
    grad = np.zeros_like(f)
    u, norms, sim = cosine_matrix(f)
    same = cls[:, None] == cls[None, :]
    upper = np.triu(same, k=1)
    n_pairs = int(upper.sum())
    neg = ~same
    if n_pairs == 0 or not neg.any():
        return 0.0, grad, True

    logits = sim / tau
    masked = np.where(neg, logits, -np.inf)
    rowmax = np.max(masked, axis=1, keepdims=True)
    has_neg = neg.any(axis=1)
    rowmax = np.where(has_neg[:, None], rowmax, 0.0)
    ex = np.where(neg, np.exp(logits - rowmax), 0.0)
    rowsum = ex.sum(axis=1)
    lse = np.where(has_neg, rowmax[:, 0] + np.log(np.where(has_neg, rowsum, 1.0)), 0.0)

    anchors = upper.sum(axis=1)  # pairs anchored at each row
    if np.any(anchors[~has_neg] > 0):
        # an anchor without negatives cannot occur when classes are binary and both present
        raise DegenerateFeature("anchor without cross-class negatives")
    scale = 1.0 / (2.0 * n_pairs)
    loss = scale * float(np.sum(-logits[upper]) + np.sum(anchors * lse))

    g_logits = np.zeros((n, n))
    g_logits[upper] -= scale
    soft = np.where(has_neg[:, None], ex / np.where(has_neg, rowsum, 1.0)[:, None], 0.0)
    g_logits += scale * anchors[:, None] * soft
    g_sim = g_logits / tau
    g_u = (g_sim + g_sim.T) @ u
    grad = (g_u - u * np.sum(u * g_u, axis=1, keepdims=True)) / norms[:, None]
    return loss, grad, False


def consistency_loss(pair: Sequence[BranchOutputs]) -> Tuple[float, list]:
    """Squared disagreement between the two branches' segmentation and distance outputs."""
    a, b = pair
    _check_same(a.seg_prob, b.seg_prob, "branch outputs")
    n = a.seg_prob.size
    ds = a.seg_prob - b.seg_prob
    dm = a.dist_pred - b.dist_pred
    loss = (float(np.sum(ds * ds)) + float(np.sum(dm * dm))) / n
    ga = {"seg_prob": 2.0 * ds / n, "dist_pred": 2.0 * dm / n}
    gb = {"seg_prob": -2.0 * ds / n, "dist_pred": -2.0 * dm / n}
    return loss, [ga, gb]


@dataclass
class LossReport:
    seg: float = 0.0
    dis: float = 0.0
    tran: float = 0.0
    con: float = 0.0
    cos: float = 0.0
    con_skipped: bool = False
    grads: list = field(default_factory=list)

    @property
    def ssl(self) -> float:
        return self.con + self.cos

    @property
    def all(self) -> float:
        return self.seg + self.dis + self.tran + self.ssl

    def row(self) -> Dict[str, float]:
        return {"seg": self.seg, "dis": self.dis, "tran": self.tran, "con": self.con,
                "cos": self.cos, "ssl": self.ssl, "all": self.all}


def _accumulate(dst: list, src: list):
    for d, s in zip(dst, src):
        for key, g in s.items():
            d[key] = d[key] + g


def total_loss(pair: Sequence[BranchOutputs], Y, M, C, samples=None, arm: str = "full",
               k: float = DEFAULT_STEEPNESS, tau: float = DEFAULT_TAU) -> LossReport:
    """Unweighted sum of the losses enabled for ``arm``.

    ``samples`` is a :class:`~dualseg.sampling.SampleSet` drawn from the pair's
    feature maps, or ``None`` when the patch had no eligible tumor cells (the
    contrastive term is then skipped).
    """
    try:
        parts = ARMS[arm]
    except KeyError:
        raise ValueError(f"unknown arm {arm!r}; expected one of {sorted(ARMS)}") from None
    rep = LossReport(grads=[zero_grads(o) for o in pair])
    if "seg" in parts:
        rep.seg, g = seg_loss(pair, Y, C)
        _accumulate(rep.grads, g)
    if "dis" in parts:
        rep.dis, g = dist_loss(pair, M)
        _accumulate(rep.grads, g)
    if "tran" in parts:
        rep.tran, g = tran_loss(pair, Y, k)
        _accumulate(rep.grads, g)
    if "con" in parts:
        if samples is None:
            rep.con_skipped = True
        else:
            rep.con, g, rep.con_skipped = contrastive_loss(samples.vectors, samples.classes, tau)
            if not rep.con_skipped:
                samples.scatter(g, [gr["features"] for gr in rep.grads])
    if "cos" in parts:
        rep.cos, g = consistency_loss(pair)
        _accumulate(rep.grads, g)
    return rep
