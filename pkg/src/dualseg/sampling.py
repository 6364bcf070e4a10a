"""Label-guided selection of positive and negative feature vectors.

Feature maps live on a coarser grid than the label: one feature cell covers a
``factor``-sized block of voxels (blocks at the far edges may be partial).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import NoTumorInPatch


class CellClass(IntEnum):
    VOID = 0
    NEG_RING = 1
    POS = 2


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # (channels, zf, yf, xf)
    factor: Tuple[int, int, int]

    @property
    def dims(self):
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def _factor3(factor) -> Tuple[int, int, int]:
    return (int(factor),) * 3 if np.isscalar(factor) else tuple(int(f) for f in factor)


def _blocks(arr: np.ndarray, factor, fill) -> np.ndarray:
    """Reshape a voxel grid into (zc, yc, xc, fz*fy*fx) blocks, padding partial cells with ``fill``."""
    f = _factor3(factor)
    cells = [-(-n // k) for n, k in zip(arr.shape, f)]
    pad = [(0, c * k - n) for c, k, n in zip(cells, f, arr.shape)]
    a = np.pad(arr, pad, constant_values=fill)
    a = a.reshape(cells[0], f[0], cells[1], f[1], cells[2], f[2])
    return a.transpose(0, 2, 4, 1, 3, 5).reshape(*cells, -1)


def cell_classes(Y, factor, erosion: int = 1, ring: int = 3) -> np.ndarray:
    """Classify feature cells as POS, NEG_RING or VOID.

    POS cells lie entirely inside the tumor after eroding it by ``erosion``
    voxels. NEG_RING cells hold no tumor voxel and sit within ``ring`` cells
    (chessboard distance) of a cell that does.
    """
    y = np.asarray(Y.data if hasattr(Y, "spacing") else Y).astype(bool)
    core = ndimage.binary_erosion(y, iterations=erosion, border_value=0) if erosion > 0 else y
    pos = _blocks(core, factor, fill=True).all(axis=-1)
    tumor = _blocks(y, factor, fill=False).any(axis=-1)
    pos &= tumor  # drop cells made only of padding
    out = np.full(tumor.shape, CellClass.VOID, dtype=np.int8)
    if tumor.any() and ring > 0:
        band = ndimage.binary_dilation(tumor, structure=np.ones((3, 3, 3), bool), iterations=ring)
        out[band & ~tumor] = CellClass.NEG_RING
    out[pos] = CellClass.POS
    return out


@dataclass(eq=False)
class SampleSet:
    """``4B`` vectors: for each branch, B positives then B negatives."""

    vectors: np.ndarray     # (n, channels)
    classes: np.ndarray     # 1 tumor, 0 normal
    branches: np.ndarray    # 0 phi, 1 varphi
    cells: np.ndarray       # flat cell index into the feature grid
    B: int

    def scatter(self, grad: np.ndarray, feature_grads: Sequence[np.ndarray]):
        """Add per-vector gradients back onto each branch's feature-map gradient (in place)."""
        for b, fg in enumerate(feature_grads):
            sel = self.branches == b
            where = np.unravel_index(self.cells[sel], fg.shape[1:])
            np.add.at(fg, (slice(None),) + where, grad[sel].T)


def _draw(rng, pool: np.ndarray, n: int) -> np.ndarray:
    return rng.choice(pool, size=n, replace=len(pool) < n)


def draw_samples(fm_pair: Sequence, cells: np.ndarray, B: int, seed) -> SampleSet:
    """Draw B POS and B NEG_RING cells, shared by both branches."""
    if B < 1:
        raise ValueError("B must be at least 1")
    maps = [fm.data if isinstance(fm, FeatureMap) else np.asarray(fm) for fm in fm_pair]
    if any(m.shape[1:] != cells.shape for m in maps):
        raise ValueError("feature map grid does not match the cell grid")
    flat = cells.ravel()
    pos = np.flatnonzero(flat == CellClass.POS)
    neg = np.flatnonzero(flat == CellClass.NEG_RING)
    if len(pos) == 0:
        raise NoTumorInPatch("no eligible tumor cell in patch")
    rng = np.random.default_rng(seed)
    idx_pos = _draw(rng, pos, B)
    idx_neg = _draw(rng, neg, B) if len(neg) else np.empty(0, dtype=np.intp)
    idx = np.concatenate([idx_pos, idx_neg])
    cls = np.concatenate([np.ones(len(idx_pos), np.int8), np.zeros(len(idx_neg), np.int8)])
    vectors, classes, branches, cell_idx = [], [], [], []
    for b, m in enumerate(maps):
        flat_map = m.reshape(m.shape[0], -1)
        vectors.append(flat_map[:, idx].T)
        classes.append(cls)
        branches.append(np.full(len(idx), b, np.int8))
        cell_idx.append(idx)
    return SampleSet(np.vstack(vectors), np.concatenate(classes), np.concatenate(branches),
                     np.concatenate(cell_idx), B)
