"""Signed Euclidean distance maps and the distance -> mask conversion.

Distances are measured between voxel centres in millimetres. A background
voxel gets the distance to the nearest foreground voxel, a foreground voxel
gets minus the distance to the nearest background voxel; both are clamped to
``[-cap, cap]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .grid import Mask, Spacing, Volume, _check_spacing, _frozen
from .errors import ShapeError

DEFAULT_CAP_MM = 30.0


@dataclass(frozen=True, eq=False)
class DistanceMap:
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    cap: float = DEFAULT_CAP_MM

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.float32:
            data = data.astype(np.float64)
        if data.ndim != 3:
            raise ShapeError(f"distance map must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("distance map holds non-finite values")
        if not self.cap > 0:
            raise ValueError("cap must be positive")
        object.__setattr__(self, "data", _frozen(np.clip(data, -self.cap, self.cap)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return tuple(self.data.shape)


@numba.njit(cache=True)
def _envelope_1d(f, step, out, v, z):
    # Lower envelope of parabolas (s*(q-p))^2 + f[p]; inf sites are skipped.
    n = f.shape[0]
    s2 = step * step
    k = -1
    for q in range(n):
        if f[q] == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        p = v[k]
        s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
        # z[0] is -inf, so this stops at k == 0 at the latest
        while s <= z[k]:
            k -= 1
            p = v[k]
            s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            out[q] = np.inf
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        d = step * (q - v[j])
        out[q] = d * d + f[v[j]]


@numba.njit(cache=True)
def _edt_sq_axis(arr, step):
    # arr: (lines, n) contiguous; transformed in place along the last axis.
    lines, n = arr.shape
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    buf = np.empty(n)
    for i in range(lines):
        for q in range(n):
            buf[q] = arr[i, q]
        _envelope_1d(buf, step, out, v, z)
        for q in range(n):
            arr[i, q] = out[q]


def edt_squared(sites: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Squared mm distance from every voxel to the nearest nonzero voxel of ``sites``.

    Exact separable transform (lower envelope of parabolas per axis). Returns
    ``inf`` everywhere when ``sites`` is empty.
    """
    f = np.where(np.asarray(sites, dtype=bool), 0.0, np.inf)
    for axis in range(f.ndim):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        shape = moved.shape
        flat = moved.reshape(-1, shape[-1])
        _edt_sq_axis(flat, float(spacing[axis]))
        f = np.moveaxis(flat.reshape(shape), -1, axis)
    return np.ascontiguousarray(f)


def signed_distance_map(m: Mask, cap: float = DEFAULT_CAP_MM) -> DistanceMap:
    if not cap > 0:
        raise ValueError("cap must be positive")
    fg = m.data.astype(bool)
    to_fg = np.sqrt(edt_squared(fg, m.spacing))
    to_bg = np.sqrt(edt_squared(~fg, m.spacing))
    signed = np.where(fg, -np.minimum(to_bg, cap), np.minimum(to_fg, cap))
    return DistanceMap(signed, m.spacing, cap)


def signed_distance_map_naive(m: Mask, cap: float = DEFAULT_CAP_MM) -> DistanceMap:
    """O(n^2) pairwise reference for :func:`signed_distance_map`."""
    if not cap > 0:
        raise ValueError("cap must be positive")
    fg = m.data.astype(bool)
    pos = np.indices(m.dims).reshape(3, -1).T * np.asarray(m.spacing)
    flat_fg = fg.ravel()
    fg_pos, bg_pos = pos[flat_fg], pos[~flat_fg]
    out = np.empty(len(pos))
    for i, p in enumerate(pos):
        others = bg_pos if flat_fg[i] else fg_pos
        if len(others) == 0:
            d = np.inf
        else:
            d = np.sqrt(((others - p) ** 2).sum(axis=1)).min()
        out[i] = -min(d, cap) if flat_fg[i] else min(d, cap)
    return DistanceMap(out.reshape(m.dims), m.spacing, cap)


def distmap_to_mask(d: DistanceMap) -> Mask:
    """Hard conversion: inside where the distance is <= 0."""
    return Mask((d.data <= 0).astype(np.uint8), d.spacing)


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def soft_conversion(d, k: float = 4.0):
    """Differentiable surrogate of :func:`distmap_to_mask`: ``sigmoid(-k * d)``.

    Accepts a :class:`DistanceMap` (returns a :class:`Volume`) or a raw array.
    """
    if not k > 0:
        raise ValueError("steepness must be positive")
    if isinstance(d, DistanceMap):
        return Volume(logistic(-k * d.data), d.spacing)
    return logistic(-k * np.asarray(d, dtype=np.float64))
