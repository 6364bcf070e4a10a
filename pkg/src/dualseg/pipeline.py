"""Sliding-window inference and the coarse-to-fine organ/lesion cascade.

Anything with a ``factor`` attribute (input dims must be multiples of it) and
``predict(x) -> (seg_prob, dist_pred, slice_prob)`` can serve as a stage
network, which is how the oracle networks in the tests plug in.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, EmptyMask
from .grid import BBox, Mask, Volume, bbox_of, crop, largest_component, paste, resample_trilinear, resize_nearest
from .objective import BranchOutputs

log = logging.getLogger(__name__)


def _tile_starts(n: int, p: int, stride: int) -> List[int]:
    if n <= p:
        return [0]
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def _round_up(n: int, f: int) -> int:
    return -(-n // f) * f


def infer_patchwise(net, v, patch: Sequence[int], overlap: float = 0.5) -> BranchOutputs:
    """Tile ``v`` with ``patch``-sized windows and average the overlapping outputs.

    The stride per axis is ``max(1, floor(patch * (1 - overlap)))``; the last
    window is shifted back to end on the border. Volumes smaller than the
    patch (or not a multiple of the network factor) are edge-padded first and
    the result is cropped back. Tiles are visited in raster order.
    """
    if not 0.0 <= overlap <= 0.9:
        raise ConfigError("overlap must lie in [0, 0.9]")
    data = np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)
    dims = data.shape
    f = int(getattr(net, "factor", 1))
    patch = tuple(_round_up(min(int(p), _round_up(n, f)), f) for p, n in zip(patch, dims))
    padded = tuple(max(_round_up(n, f), p) for n, p in zip(dims, patch))
    if padded != dims:
        data = np.pad(data, [(0, a - n) for a, n in zip(padded, dims)], mode="edge")
    if patch == padded:
        seg, dist, sl = net.predict(data)
        seg, dist, sl = np.asarray(seg), np.asarray(dist), np.asarray(sl)
    else:
        strides = [max(1, int(np.floor(p * (1.0 - overlap)))) for p in patch]
        starts = [_tile_starts(n, p, s) for n, p, s in zip(padded, patch, strides)]
        seg = np.zeros(padded)
        dist = np.zeros(padded)
        weight = np.zeros(padded)
        sl = np.zeros(padded[0])
        sl_weight = np.zeros(padded[0])
        for z in starts[0]:
            for y in starts[1]:
                for x in starts[2]:
                    win = (slice(z, z + patch[0]), slice(y, y + patch[1]), slice(x, x + patch[2]))
                    s, d, c = net.predict(data[win])
                    seg[win] += s
                    dist[win] += d
                    weight[win] += 1.0
                    sl[win[0]] += c
                    sl_weight[win[0]] += 1.0
        seg /= weight
        dist /= weight
        sl /= sl_weight
    cut = tuple(slice(0, n) for n in dims)
    return BranchOutputs(seg[cut], dist[cut], sl[:dims[0]])


def binarize(seg_prob, threshold: float = 0.5, spacing=None) -> Mask:
    """Voxel is foreground iff ``prob >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold must lie in (0, 1)")
    if isinstance(seg_prob, Volume):
        spacing = seg_prob.spacing if spacing is None else spacing
        seg_prob = seg_prob.data
    return Mask((np.asarray(seg_prob) >= threshold).astype(np.uint8), spacing or (1.0, 1.0, 1.0))


@dataclass(frozen=True)
class PipelineConfig:
    threshold: float = 0.5
    margin: int = 8
    coarse_factor: int = 2
    patch: Tuple[int, int, int] = (16, 32, 32)
    overlap: float = 0.5
    connectivity: int = 26

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.margin < 0 or self.coarse_factor < 1:
            raise ConfigError("margin must be >= 0 and coarse_factor >= 1")

    @classmethod
    def from_run_config(cls, rc) -> "PipelineConfig":
        p = rc.section("pipeline")
        return cls(p["threshold"], p["margin"], p["coarse_factor"], p["patch"], p["overlap"], p["connectivity"])


@dataclass
class StageRecord:
    name: str
    seconds: float
    roi: Optional[BBox]
    voxels: int
    warning: str = ""


@dataclass
class TwoStageResult:
    organ: Mask
    lesion: Mask
    organ_roi: BBox
    lesion_roi: BBox
    stages: List[StageRecord] = field(default_factory=list)

    @property
    def warnings(self) -> List[str]:
        return [s.warning for s in self.stages if s.warning]


def _coarse_mask(net, v: Volume, cfg: PipelineConfig) -> Mask:
    """Segment at ``coarse_factor``-times coarser spacing and bring the mask back to ``v``'s grid."""
    f = cfg.coarse_factor
    small = v if f == 1 else resample_trilinear(v, tuple(s * f for s in v.spacing))
    out = infer_patchwise(net, small, cfg.patch, cfg.overlap)
    m = binarize(out.seg_prob, cfg.threshold, small.spacing)
    if m.dims != v.dims:
        m = resize_nearest(m, v.dims)
    return Mask(m.data, v.spacing)


def _fine_mask(net, v: Volume, cfg: PipelineConfig) -> np.ndarray:
    return binarize(infer_patchwise(net, v, cfg.patch, cfg.overlap).seg_prob, cfg.threshold).data


def run_two_stage(vol: Volume, organ_coarse_net, organ_fine_net, lesion_coarse_net, lesion_fine_net,
                  cfg: PipelineConfig = PipelineConfig(), roi_mode: str = "seg",
                  organ_mask: Optional[Mask] = None) -> TwoStageResult:
    """Organ coarse -> organ fine -> lesion coarse -> lesion fine.

    In ``roi_mode="mask"`` the supplied ``organ_mask`` replaces both organ
    stages. Each fine stage overwrites the coarse result inside its ROI. The
    lesion ROI is clipped to the organ ROI, so no lesion voxel ever lands
    outside the organ box.
    """
    if roi_mode not in ("seg", "mask"):
        raise ConfigError(f"unknown roi mode {roi_mode!r}")
    dims = vol.dims
    stages: List[StageRecord] = []
    full = BBox.full(dims)

    # organ
    if roi_mode == "mask":
        if organ_mask is None:
            raise ConfigError("roi mode 'mask' needs an organ mask")
        organ = Mask(organ_mask.data, vol.spacing)
        try:
            organ_roi = bbox_of(organ, cfg.margin)
            warn = ""
        except EmptyMask:
            organ_roi, warn = full, "empty organ mask; using whole volume"
        stages.append(StageRecord("organ_mask", 0.0, organ_roi, organ.count, warn))
    else:
        t = time.perf_counter()
        coarse = largest_component(_coarse_mask(organ_coarse_net, vol, cfg), cfg.connectivity)
        try:
            organ_roi = bbox_of(coarse, cfg.margin)
            warn = ""
        except EmptyMask:
            organ_roi, warn = full, "empty organ coarse result; using whole volume"
            log.warning(warn)
        stages.append(StageRecord("organ_coarse", time.perf_counter() - t, organ_roi, coarse.count, warn))
        t = time.perf_counter()
        fine = _fine_mask(organ_fine_net, crop(vol, organ_roi), cfg)
        organ = Mask(paste(coarse.data, fine, organ_roi), vol.spacing)
        stages.append(StageRecord("organ_fine", time.perf_counter() - t, organ_roi, organ.count))

    # lesion, confined to the organ ROI
    t = time.perf_counter()
    sub = crop(vol, organ_roi)
    lcoarse = _coarse_mask(lesion_coarse_net, sub, cfg)
    lesion_full = paste(np.zeros(dims, np.uint8), lcoarse.data, organ_roi)
    try:
        local = bbox_of(lcoarse, cfg.margin)
        lesion_roi = BBox(tuple(a + o for a, o in zip(local.lo, organ_roi.lo)),
                          tuple(b + o for b, o in zip(local.hi, organ_roi.lo))).intersect(organ_roi)
        warn = ""
    except EmptyMask:
        lesion_roi, warn = organ_roi, "empty lesion coarse result; using organ ROI"
    stages.append(StageRecord("lesion_coarse", time.perf_counter() - t, lesion_roi, lcoarse.count, warn))
    t = time.perf_counter()
    lfine = _fine_mask(lesion_fine_net, crop(vol, lesion_roi), cfg)
    lesion = Mask(paste(lesion_full, lfine, lesion_roi), vol.spacing)
    stages.append(StageRecord("lesion_fine", time.perf_counter() - t, lesion_roi, lesion.count))
    return TwoStageResult(organ, lesion, organ_roi, lesion_roi, stages)


STAGE_HEADER = ("case_id", "stage", "seconds", "roi_lo", "roi_hi", "voxels", "warning")


def stage_rows(case_id: str, result: TwoStageResult, timings: bool = True) -> List[Tuple]:
    """Report rows; ``timings=False`` zeroes wall-clock times for byte-stable files."""
    rows = []
    for s in result.stages:
        lo = " ".join(map(str, s.roi.lo)) if s.roi else ""
        hi = " ".join(map(str, s.roi.hi)) if s.roi else ""
        rows.append((case_id, s.name, round(s.seconds, 6) if timings else 0.0, lo, hi, s.voxels, s.warning))
    return rows
