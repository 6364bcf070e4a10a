"""Random-convolution texture perturbation and geometric augmentation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import InvalidMix
from .grid import Mask, Volume

KERNEL_SIZES = (1, 3, 5, 7)


@dataclass(frozen=True, eq=False)
class RandKernel:
    size: int
    weights: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if self.size % 2 != 1 or w.shape != (self.size,) * 3:
            raise ValueError(f"kernel must be an odd cube, got size {self.size} and shape {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def weight_sum(self) -> float:
        return float(self.weights.sum())

    @classmethod
    def dirac(cls, size: int = 3) -> "RandKernel":
        w = np.zeros((size,) * 3)
        w[(size // 2,) * 3] = 1.0
        return cls(size, w)


@dataclass(frozen=True, eq=False)
class AugmentedPair:
    x_phi: Volume
    x_varphi: Volume
    a_phi: float
    a_varphi: float
    kernel_phi: RandKernel
    kernel_varphi: RandKernel
    label: Optional[Mask] = None


def sample_kernel(rng_seed) -> RandKernel:
    """Kernel side drawn from {1,3,5,7}; weights i.i.d. N(0, 1/k^3)."""
    rng = np.random.default_rng(rng_seed)
    k = int(rng.choice(KERNEL_SIZES))
    w = rng.normal(0.0, np.sqrt(1.0 / k ** 3), size=(k, k, k))
    seed = rng_seed if isinstance(rng_seed, (int, np.integer)) else None
    return RandKernel(k, w, seed)


def perturb(x: Volume, kernel: RandKernel, a: float) -> Volume:
    """Mix ``a * (kernel * x) + (1 - a) * x`` and map back onto the input's value range.

    A constant mixed result is mapped to the midpoint of the input range.
    """
    if not 0.0 <= a <= 1.0:
        raise InvalidMix(f"mix coefficient must lie in [0, 1], got {a}")
    data = x.data
    conv = ndimage.convolve(data, kernel.weights, mode="reflect")
    # written as x + a*(conv - x) so that a == 0 or conv == x is exact
    mixed = data + a * (conv - data)
    lo, hi = data.min(), data.max()
    mlo, mhi = mixed.min(), mixed.max()
    if mlo == lo and mhi == hi:
        return x.with_data(mixed)
    if mhi == mlo:
        return x.with_data(np.full_like(mixed, 0.5 * (lo + hi)))
    out = (mixed - mlo) / (mhi - mlo) * (hi - lo) + lo
    return x.with_data(np.clip(out, lo, hi))


def make_pair(x: Volume, seed, label: Optional[Mask] = None) -> AugmentedPair:
    """Two independent (kernel, mix) draws applied to the same volume."""
    if isinstance(seed, np.random.SeedSequence):
        # rebuild so spawning never mutates the caller's sequence
        seed = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    else:
        seed = np.random.SeedSequence(seed)
    seqs = seed.spawn(2)
    parts = []
    for ss in seqs:
        rng = np.random.default_rng(ss)
        kernel = sample_kernel(rng)
        a = float(rng.uniform(0.0, 1.0))
        parts.append((kernel, a, perturb(x, kernel, a)))
    (k1, a1, v1), (k2, a2, v2) = parts
    return AugmentedPair(v1, v2, a1, a2, k1, k2, label)


@dataclass(frozen=True)
class GeometricPlan:
    angle_deg: Optional[float] = None
    mirror_axis: Optional[int] = None
    noise_seed: Optional[int] = None

    @property
    def is_noop(self) -> bool:
        return self.angle_deg is None and self.mirror_axis is None and self.noise_seed is None


def geometric_plan(seed, p_rotate: float = 0.5, p_mirror: float = 0.5,
                   p_noise: float = 0.5, max_angle: float = 15.0) -> GeometricPlan:
    rng = np.random.default_rng(seed)
    flips = rng.random(3)
    angle = float(rng.uniform(-max_angle, max_angle))
    axis = int(rng.integers(0, 3))
    noise_seed = int(rng.integers(0, 2 ** 31))
    return GeometricPlan(
        angle_deg=angle if flips[0] < p_rotate else None,
        mirror_axis=axis if flips[1] < p_mirror else None,
        noise_seed=noise_seed if flips[2] < p_noise else None,
    )


def rotate_inplane(x: Volume, y: Optional[Mask], angle_deg: float):
    xr = ndimage.rotate(x.data, angle_deg, axes=(2, 1), reshape=False, order=1, mode="nearest")
    xr = np.clip(xr, x.data.min(), x.data.max())
    yr = None
    if y is not None:
        yr = y.with_data(ndimage.rotate(y.data, angle_deg, axes=(2, 1), reshape=False,
                                        order=0, mode="constant", cval=0))
    return x.with_data(xr), yr


def apply_plan(x: Volume, y: Mask, plan: GeometricPlan, noise_frac: float = 0.05) -> Tuple[Volume, Mask]:
    if plan.angle_deg is not None:
        x, y = rotate_inplane(x, y, plan.angle_deg)
    if plan.mirror_axis is not None:
        x = x.with_data(np.flip(x.data, axis=plan.mirror_axis))
        y = y.with_data(np.flip(y.data, axis=plan.mirror_axis))
    if plan.noise_seed is not None:
        rng = np.random.default_rng(plan.noise_seed)
        sigma = noise_frac * float(x.data.max() - x.data.min())
        x = x.with_data(x.data + rng.normal(0.0, sigma, size=x.dims))
    return x, y


def geometric_augment(x: Volume, y: Mask, seed, noise_frac: float = 0.05, **kwargs) -> Tuple[Volume, Mask]:
    """Random in-plane rotation, mirroring and additive noise (noise hits ``x`` only, and comes last)."""
    return apply_plan(x, y, geometric_plan(seed, **kwargs), noise_frac)
