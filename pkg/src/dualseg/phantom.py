"""Synthetic multi-domain phantoms: an ellipsoidal organ holding one lesion blob.

Geometry depends only on the case seed; the domain style controls texture,
contrast, bias and noise. Rendering the same seed under two styles therefore
gives identical masks with shifted appearance.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import GenerationFailed
from .grid import Mask, Volume
from .sdt import edt_squared

DESK_DIMS = (32, 64, 64)
MAX_ATTEMPTS = 20


@dataclass(frozen=True)
class DomainStyle:
    name: str
    octaves: int = 2
    frequency: float = 4.0     # lattice cells across the largest grid side
    texture_amp: float = 0.15
    contrast: float = 1.0
    bias: float = 0.0
    lesion_delta: float = -0.18
    noise_sigma: float = 0.02
    background: float = 0.25
    organ: float = 0.6


STYLES: Dict[str, DomainStyle] = {
    "A": DomainStyle("A", octaves=2, frequency=4.0, texture_amp=0.15, contrast=1.0, bias=0.0,
                     lesion_delta=-0.20, noise_sigma=0.02),
    "B": DomainStyle("B", octaves=3, frequency=6.0, texture_amp=0.22, contrast=0.8, bias=0.08,
                     lesion_delta=-0.18, noise_sigma=0.04),
    "C": DomainStyle("C", octaves=4, frequency=9.0, texture_amp=0.28, contrast=1.15, bias=-0.1,
                     lesion_delta=-0.16, noise_sigma=0.05),
}


@dataclass(frozen=True, eq=False)
class PhantomCase:
    volume: Volume
    organ: Mask
    lesion: Mask
    domain: str
    seed: int


def value_noise(shape: Sequence[int], frequency: float, octaves: int, rng: np.random.Generator) -> np.ndarray:
    """Multi-octave lattice noise, trilinearly interpolated, normalised to [0, 1]."""
    shape = tuple(shape)
    grid = np.indices(shape, dtype=np.float64)
    out = np.zeros(shape)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        period = max(shape) / (frequency * 2 ** o)
        lattice = rng.random(tuple(int(np.ceil(n / period)) + 2 for n in shape))
        out += amp * ndimage.map_coordinates(lattice, grid / period, order=1, mode="nearest")
        total += amp
        amp *= 0.5
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def _style_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def _organ(rng, dims) -> np.ndarray:
    d = np.asarray(dims, dtype=np.float64)
    frac = rng.uniform(0.10, 0.25)
    c = (6.0 * frac / np.pi) ** (1.0 / 3.0)
    radii = c * rng.uniform(0.85, 1.15, size=3)
    center = d / 2.0 + rng.uniform(-0.08, 0.08, size=3) * d
    rot = Rotation.from_euler("zyx", rng.uniform(-25, 25, size=3), degrees=True).as_matrix()
    pts = (np.indices(dims).reshape(3, -1).T - center) / (d / 2.0)
    local = pts @ rot.T
    inside = ((local / radii) ** 2).sum(axis=1) <= 1.0
    return inside.reshape(dims)


def _lesion(rng, organ: np.ndarray) -> np.ndarray:
    n_organ = organ.sum()
    frac = rng.uniform(0.025, 0.09)
    radius = (3.0 * frac * n_organ / (4.0 * np.pi)) ** (1.0 / 3.0)
    depth = np.sqrt(edt_squared(~organ))
    candidates = np.argwhere(depth >= radius + 1.0)
    if len(candidates) == 0:
        return np.zeros_like(organ)
    center = candidates[rng.integers(len(candidates))]
    wobble = 2.0 * value_noise(organ.shape, 3.0, 1, rng) - 1.0
    dist = np.sqrt(((np.indices(organ.shape) - center[:, None, None, None]) ** 2).sum(axis=0))
    blob = dist <= radius * (1.0 + 0.3 * wobble)
    inner = ndimage.binary_erosion(organ, border_value=0)
    return blob & inner


def gen_geometry(seed: int, dims=DESK_DIMS) -> Tuple[np.ndarray, np.ndarray]:
    """Organ and lesion masks for ``seed``; raises GenerationFailed after repeated rejections."""
    rng = np.random.default_rng([int(seed), 0])
    n = int(np.prod(dims))
    for _ in range(MAX_ATTEMPTS):
        organ = _organ(rng, tuple(dims))
        if not 0.10 <= organ.sum() / n <= 0.25:
            continue
        lesion = _lesion(rng, organ)
        ratio = lesion.sum() / organ.sum()
        if 0.02 <= ratio <= 0.10:
            return organ.astype(np.uint8), lesion.astype(np.uint8)
    raise GenerationFailed(f"no valid geometry for seed {seed} within {MAX_ATTEMPTS} attempts")


def render(style: DomainStyle, organ: np.ndarray, lesion: np.ndarray, seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 1, _style_key(style.name)])
    base = np.full(organ.shape, style.background)
    base[organ.astype(bool)] = style.organ
    base[lesion.astype(bool)] = style.organ + style.lesion_delta
    tex = value_noise(organ.shape, style.frequency, style.octaves, rng) - 0.5
    img = style.bias + style.contrast * (base + style.texture_amp * tex)
    img += rng.normal(0.0, style.noise_sigma, size=organ.shape)
    # stored as float32 so the in-memory case matches its file bit for bit
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_case(style: DomainStyle, seed: int, dims=DESK_DIMS, spacing=(1.0, 1.0, 1.0)) -> PhantomCase:
    if min(dims) < 8:
        raise ValueError("phantom dims must be at least 8 per axis")
    organ, lesion = gen_geometry(seed, dims)
    img = render(style, organ, lesion, seed)
    return PhantomCase(Volume(img, spacing), Mask(organ, spacing), Mask(lesion, spacing), style.name, int(seed))


def case_seed(seed: int, domain_index: int, i: int) -> int:
    return int(np.random.SeedSequence([int(seed), domain_index, i]).generate_state(1)[0])


def gen_dataset(styles: Sequence[DomainStyle], counts: Dict[str, int], seed: int, out_dir,
                dims=DESK_DIMS, spacing=(1.0, 1.0, 1.0)) -> Path:
    """Write every case plus ``manifest.csv`` under ``out_dir``; returns the manifest path."""
    from .io import ManifestRow, write_dsv1, write_manifest

    out = Path(out_dir)
    for sub in ("volumes", "organs", "lesions"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows: List[ManifestRow] = []
    for d_idx, style in enumerate(styles):
        for i in range(int(counts.get(style.name, 0))):
            case = gen_case(style, case_seed(seed, d_idx, i), dims, spacing)
            cid = f"{style.name}_{i:03d}"
            paths = (f"volumes/{cid}.dsv", f"organs/{cid}.dsv", f"lesions/{cid}.dsv")
            write_dsv1(case.volume, out / paths[0])
            write_dsv1(case.organ, out / paths[1])
            write_dsv1(case.lesion, out / paths[2])
            rows.append(ManifestRow(cid, style.name, *paths))
    return write_manifest(rows, out / "manifest.csv")
