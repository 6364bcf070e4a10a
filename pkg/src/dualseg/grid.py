"""Grid containers and the preprocessing operations shared by every stage.

Arrays are indexed ``[z, y, x]`` (C order, so the flat index is
``(z*dy + y)*dx + x``). Voxel ``(z, y, x)`` sits at physical position
``(z*sz, y*sy, x*sx)`` in millimetres.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, InvalidBBox, InvalidWindow, ShapeError

Spacing = Tuple[float, float, float]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _check_spacing(spacing) -> Spacing:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be three positive reals, got {spacing!r}")
    return sp


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense scalar grid with physical spacing.

    float32 data is kept as float32 (the on-disk precision); anything else is
    stored as float64.
    """

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.float32:
            data = data.astype(np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume holds non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary grid, one byte per voxel."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"mask data must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype != np.uint8:
            if not np.all((data == 0) | (data == 1)):
                raise ValueError("mask values must be 0 or 1")
            data = data.astype(np.uint8)
        elif data.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def with_data(self, data) -> "Mask":
        return Mask(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return (self.spacing == other.spacing and self.dims == other.dims
                and bool(np.array_equal(self.data, other.data)))

    __hash__ = None


@dataclass(frozen=True)
class BBox:
    """Inclusive voxel box: ``lo[i] <= idx[i] <= hi[i]``."""

    lo: Tuple[int, int, int]
    hi: Tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3 or any(a > b for a, b in zip(lo, hi)):
            raise InvalidBBox(f"malformed box {lo}..{hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    def fits(self, dims: Sequence[int]) -> bool:
        return all(0 <= a and b < n for a, b, n in zip(self.lo, self.hi, dims))

    @classmethod
    def full(cls, dims: Sequence[int]) -> "BBox":
        return cls((0, 0, 0), tuple(n - 1 for n in dims))

    def intersect(self, other: "BBox") -> "BBox":
        return BBox(tuple(max(a, b) for a, b in zip(self.lo, other.lo)),
                    tuple(min(a, b) for a, b in zip(self.hi, other.hi)))


Grid = Union[Volume, Mask]


def window_normalize(v: Volume, lo: float = -100.0, hi: float = 240.0) -> Volume:
    """Clamp to ``[lo, hi]`` and rescale to ``[0, 1]``."""
    if not lo < hi:
        raise InvalidWindow(f"window lower bound {lo} must be below upper bound {hi}")
    return v.with_data((np.clip(v.data, lo, hi) - lo) / (hi - lo))


def _axis_positions(n_in: int, n_out: int, ratio: float) -> np.ndarray:
    return np.clip(np.arange(n_out) * ratio, 0.0, n_in - 1)


def _resampled_dims(dims, old_spacing, new_spacing):
    return tuple(max(1, int(round(n * so / sn))) for n, so, sn in zip(dims, old_spacing, new_spacing))


def resample_trilinear(v: Volume, new_spacing: Sequence[float]) -> Volume:
    """Trilinear resampling at voxel centres with clamp-to-edge."""
    new_spacing = _check_spacing(new_spacing)
    out_dims = _resampled_dims(v.dims, v.spacing, new_spacing)
    data = v.data
    for axis in range(3):
        n_in = data.shape[axis]
        pos = _axis_positions(n_in, out_dims[axis], new_spacing[axis] / v.spacing[axis])
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w = pos - i0
        shape = [1, 1, 1]
        shape[axis] = -1
        w = w.reshape(shape)
        data = np.take(data, i0, axis=axis) * (1.0 - w) + np.take(data, i1, axis=axis) * w
    return Volume(data, new_spacing)


def resample_nearest(m: Mask, new_spacing: Sequence[float]) -> Mask:
    """Nearest-neighbour resampling for label grids."""
    new_spacing = _check_spacing(new_spacing)
    out_dims = _resampled_dims(m.dims, m.spacing, new_spacing)
    data = m.data
    for axis in range(3):
        n_in = data.shape[axis]
        pos = _axis_positions(n_in, out_dims[axis], new_spacing[axis] / m.spacing[axis])
        idx = np.minimum(np.floor(pos + 0.5).astype(np.intp), n_in - 1)
        data = np.take(data, idx, axis=axis)
    return Mask(data, new_spacing)


def resize_nearest(m: Mask, dims: Sequence[int]) -> Mask:
    """Nearest-neighbour resize of a mask to explicit dims (spacing rescaled to match)."""
    spacing = tuple(s * n / d for s, n, d in zip(m.spacing, m.dims, dims))
    data = m.data
    for axis in range(3):
        n_in, n_out = data.shape[axis], dims[axis]
        idx = np.minimum(np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.intp), n_in - 1)
        data = np.take(data, idx, axis=axis)
    return Mask(data, spacing)


def bbox_of(m: Mask, margin: Union[int, Sequence[int]] = 0) -> BBox:
    """Tightest box around the foreground, grown by ``margin`` and clamped to the grid."""
    idx = np.argwhere(m.data)
    if idx.size == 0:
        raise EmptyMask("cannot take the bounding box of an empty mask")
    margin = (margin,) * 3 if np.isscalar(margin) else tuple(margin)
    lo = np.maximum(idx.min(axis=0) - margin, 0)
    hi = np.minimum(idx.max(axis=0) + margin, np.array(m.dims) - 1)
    return BBox(tuple(lo), tuple(hi))


def crop(v: Grid, b: BBox) -> Grid:
    if not b.fits(v.dims):
        raise InvalidBBox(f"box {b.lo}..{b.hi} exceeds grid {v.dims}")
    return v.with_data(v.data[b.slices])


def paste(dst: np.ndarray, src: np.ndarray, b: BBox) -> np.ndarray:
    """Return a copy of ``dst`` with ``src`` written into box ``b``."""
    if not b.fits(dst.shape) or tuple(src.shape) != b.shape:
        raise InvalidBBox(f"cannot paste {src.shape} into box {b.lo}..{b.hi} of {dst.shape}")
    out = np.array(dst, copy=True)
    out[b.slices] = src
    return out


def largest_component(m: Mask, connectivity: int = 26) -> Mask:
    """Keep the largest connected foreground component.

    Ties go to the component holding the smallest flat index; scipy labels
    components in raster order of their first voxel, so the lowest label wins.
    """
    if connectivity not in (6, 26):
        raise ValueError("connectivity must be 6 or 26")
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labels, n = ndimage.label(m.data, structure=structure)
    if n == 0:
        return m.with_data(np.zeros(m.dims, dtype=np.uint8))
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return m.with_data((labels == keep).astype(np.uint8))


def slice_labels(m: Mask) -> np.ndarray:
    """Per-z indicator of any foreground voxel in that slice."""
    return m.data.reshape(m.dims[0], -1).max(axis=1).astype(np.uint8)
