"""Cross-domain ablation on phantoms: train on some domains, test on an unseen one.

For every seed and arm a lesion network is trained on the training domains,
then evaluated on the held-out domain with the ground-truth organ box as ROI.
Two numbers are kept per run: mean lesion DSC and the mean consistency loss
between texture-perturbed copies of a lesion-centred patch of each test case.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import phantom
from .grid import Mask, Volume, bbox_of, crop, paste
from .metrics import dsc
from .nn.network import NetworkConfig
from .objective import BranchOutputs, consistency_loss
from .pipeline import binarize, infer_patchwise
from .texaug import make_pair
from .trainer import Case, TrainConfig, train

log = logging.getLogger(__name__)

RUN_HEADER = ("seed", "arm", "mean_dsc", "mean_consistency", "mean_consistency_seg", "train_seconds")
CASE_HEADER = ("seed", "arm", "case_id", "dsc", "consistency", "consistency_seg")


@dataclass(frozen=True)
class ExperimentConfig:
    train_domains: Tuple[str, ...] = ("A", "B")
    test_domain: str = "C"
    cases_per_domain: int = 20
    seeds: int = 5
    arms: Tuple[str, ...] = ("bl", "full")
    data_seed: int = 0
    dims: Tuple[int, int, int] = phantom.DESK_DIMS
    margin: int = 8
    threshold: float = 0.5
    overlap: float = 0.5

    @classmethod
    def from_run_config(cls, rc, **overrides) -> "ExperimentConfig":
        counts = rc["phantom.counts"]
        e = rc.section("experiment")
        kw = dict(train_domains=e["train_domains"], test_domain=e["test_domain"],
                  cases_per_domain=int(counts.get(e["test_domain"], 20)), seeds=e["seeds"], arms=e["arms"],
                  data_seed=rc["seed"], dims=rc["phantom.dims"], margin=rc["pipeline.margin"],
                  threshold=rc["pipeline.threshold"], overlap=rc["pipeline.overlap"])
        kw.update(overrides)
        return cls(**kw)


@dataclass
class RunResult:
    seed: int
    arm: str
    case_ids: List[str]
    dsc: np.ndarray
    consistency: np.ndarray
    consistency_seg: np.ndarray
    train_seconds: float
    loss_curve: np.ndarray

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.dsc))

    @property
    def mean_consistency(self) -> float:
        return float(np.mean(self.consistency))

    @property
    def mean_consistency_seg(self) -> float:
        return float(np.mean(self.consistency_seg))


def phantom_cases(domains: Sequence[str], count: int, seed: int, dims) -> List[phantom.PhantomCase]:
    """Cases in the same order and with the same seeds as :func:`phantom.gen_dataset`."""
    order = list(phantom.STYLES)
    out = []
    for name in domains:
        d_idx = order.index(name)
        for i in range(count):
            out.append(phantom.gen_case(phantom.STYLES[name], phantom.case_seed(seed, d_idx, i), dims))
    return out


def as_training_set(cases: Sequence[phantom.PhantomCase]) -> List[Case]:
    return [Case(f"{c.domain}_{i:03d}", c.domain, np.asarray(c.volume.data, np.float64), c.lesion.data,
                 c.volume.spacing) for i, c in enumerate(cases)]


def segment_in_organ(net, case: phantom.PhantomCase, patch, margin: int, threshold: float,
                     overlap: float) -> Mask:
    """Lesion mask on the full grid, predicted inside the ground-truth organ box."""
    roi = bbox_of(case.organ, margin)
    out = infer_patchwise(net, crop(case.volume, roi), patch, overlap)
    inside = binarize(out.seg_prob, threshold).data
    return Mask(paste(np.zeros(case.volume.dims, np.uint8), inside, roi), case.volume.spacing)


def lesion_patch(case: phantom.PhantomCase, patch) -> Volume:
    """Training-sized crop centred on the lesion centroid (shifted to fit the grid)."""
    dims = np.array(case.volume.dims)
    p = np.minimum(np.array(patch), dims)
    center = np.round(np.argwhere(case.lesion.data).mean(axis=0)).astype(int)
    lo = np.clip(center - p // 2, 0, dims - p)
    return Volume(case.volume.data[tuple(slice(a, a + n) for a, n in zip(lo, p))], case.volume.spacing)


def texture_consistency(net, case: phantom.PhantomCase, seed, patch) -> Tuple[float, float]:
    """Consistency loss between two texture draws of a lesion-centred patch.

    Also returns the segmentation-only part (mean squared probability gap),
    which is comparable across arms whether or not the distance head was trained.
    """
    pair = make_pair(lesion_patch(case, patch), seed)
    outs = [BranchOutputs(*net.predict(np.asarray(x.data, np.float64))) for x in (pair.x_phi, pair.x_varphi)]
    gap = outs[0].seg_prob - outs[1].seg_prob
    return consistency_loss(outs)[0], float(np.mean(gap * gap))


def evaluate_run(net, cases, cfg: ExperimentConfig, patch) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-case DSC, consistency loss and its segmentation-only part."""
    scores, cons = [], []
    for i, case in enumerate(cases):
        pred = segment_in_organ(net, case, patch, cfg.margin, cfg.threshold, cfg.overlap)
        scores.append(dsc(pred, case.lesion))
        cons.append(texture_consistency(net, case, [cfg.data_seed, 7, i], patch))
    c = np.array(cons)
    return np.array(scores), c[:, 0], c[:, 1]


def run_experiment(cfg: ExperimentConfig, train_cfg: TrainConfig, net_cfg: NetworkConfig) -> List[RunResult]:
    train_cases = phantom_cases(cfg.train_domains, cfg.cases_per_domain, cfg.data_seed, cfg.dims)
    test_cases = phantom_cases((cfg.test_domain,), cfg.cases_per_domain, cfg.data_seed, cfg.dims)
    dataset = as_training_set(train_cases)
    ids = [f"{cfg.test_domain}_{i:03d}" for i in range(len(test_cases))]
    results = []
    for seed in range(cfg.seeds):
        for arm in cfg.arms:
            t = time.perf_counter()
            tc = TrainConfig(**{**train_cfg.__dict__, "arm": arm, "seed": seed})
            nc = NetworkConfig(**{**net_cfg.__dict__, "seed": seed})
            net, records = train(tc, dataset, nc)
            secs = time.perf_counter() - t
            scores, cons, cons_seg = evaluate_run(net, test_cases, cfg, tc.patch)
            curve = np.array([r.report.all for r in records])
            results.append(RunResult(seed, arm, ids, scores, cons, cons_seg, secs, curve))
            log.info("seed %d arm %s: dsc %.2f consistency %.4g (%.0fs)", seed, arm,
                     results[-1].mean_dsc, results[-1].mean_consistency, secs)
    return results


def run_rows(results: Sequence[RunResult], timings: bool = False):
    return [(r.seed, r.arm, r.mean_dsc, r.mean_consistency, r.mean_consistency_seg,
             round(r.train_seconds, 3) if timings else 0.0) for r in results]


def case_rows(results: Sequence[RunResult]):
    return [(r.seed, r.arm, cid, float(d), float(c), float(cs))
            for r in results for cid, d, c, cs in zip(r.case_ids, r.dsc, r.consistency, r.consistency_seg)]


def summarize(results: Sequence[RunResult], a: str = "full", b: str = "bl") -> Dict[str, float]:
    """Mean DSC per arm and the number of seeds where arm ``a`` is more consistent than ``b``."""
    by = {(r.seed, r.arm): r for r in results}
    seeds = sorted({r.seed for r in results})
    out = {f"mean_dsc_{arm}": float(np.mean([by[s, arm].mean_dsc for s in seeds])) for arm in (a, b)}
    out["consistency_wins"] = sum(by[s, a].mean_consistency < by[s, b].mean_consistency for s in seeds)
    out["consistency_seg_wins"] = sum(by[s, a].mean_consistency_seg < by[s, b].mean_consistency_seg for s in seeds)
    out["seeds"] = len(seeds)
    return out
