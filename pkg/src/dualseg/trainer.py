"""Training loop: patch sampling, texture pairs, loss assembly, Adam."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import io
from .errors import ConfigError, DegenerateFeature, NoTumorInPatch, NonFiniteGradient
from .grid import Mask, Volume, slice_labels
from .nn.network import Network, NetworkConfig
from .objective import ARMS, LossReport, total_loss
from .sampling import cell_classes, draw_samples
from .sdt import signed_distance_map
from .texaug import apply_plan, geometric_plan, make_pair

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = ("iter", "seg", "dis", "tran", "con", "cos", "all", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    max_iter: int = 200
    batch_size: int = 1
    epochs: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_mode: str = "compound"
    arm: str = "full"
    target: str = "lesion"
    patch: Tuple[int, int, int] = (16, 32, 32)
    fg_prob: float = 0.7
    seed: int = 0
    cap_mm: float = 30.0
    k: float = 4.0
    tau: float = 0.1
    B: int = 4
    erosion: int = 1
    ring: int = 3
    p_rotate: float = 0.5
    p_mirror: float = 0.5
    p_noise: float = 0.5
    max_angle: float = 15.0
    noise_frac: float = 0.05

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported (one texture pair per step)")
        if self.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.arm!r}")
        if self.lr_mode not in ("compound", "poly"):
            raise ConfigError(f"unknown lr_mode {self.lr_mode!r}")
        if self.target not in ("lesion", "organ"):
            raise ConfigError(f"unknown target {self.target!r}")

    @classmethod
    def from_run_config(cls, rc, **overrides) -> "TrainConfig":
        t = rc.section("train")
        kw = dict(lr=t["lr"], max_iter=t["max_iter"], batch_size=t["batch_size"], epochs=t["epochs"],
                  beta1=t["beta1"], beta2=t["beta2"], adam_eps=t["adam_eps"], lr_mode=t["lr_mode"],
                  arm=t["arm"], target=t["target"], patch=t["patch"], fg_prob=t["fg_prob"],
                  seed=rc["seed"], cap_mm=rc["sdt.cap_mm"], k=rc["sdt.k"], tau=rc["aug.tau"],
                  B=rc["contrast.B"], erosion=rc["contrast.erosion"], ring=rc["contrast.ring"],
                  p_rotate=rc["aug.p_rotate"], p_mirror=rc["aug.p_mirror"], p_noise=rc["aug.p_noise"],
                  max_angle=rc["aug.max_angle"], noise_frac=rc["aug.noise_frac"])
        kw.update(overrides)
        return cls(**kw)


def network_config(rc, seed: Optional[int] = None) -> NetworkConfig:
    n = rc.section("net")
    return NetworkConfig(levels=n["levels"], base_channels=n["base_channels"], res_blocks=n["res_blocks"],
                         dropout=n["dropout"], head_channels=n["head_channels"], proj_dim=n["proj_dim"],
                         dist_scale=n["dist_scale"],
                         seed=rc["seed"] if seed is None else seed)


def lr_step(lr: float, current_iter: int, max_iter: int) -> float:
    """``lr * (1 - current_iter / max_iter) ** 0.9``: compounds on the previous rate."""
    if not 0 <= current_iter <= max_iter:
        raise ValueError("current_iter must lie in [0, max_iter]")
    return lr * (1.0 - current_iter / max_iter) ** 0.9


def poly_lr(lr0: float, current_iter: int, max_iter: int) -> float:
    return lr0 * (1.0 - current_iter / max_iter) ** 0.9


def lr_schedule(lr0: float, max_iter: int, mode: str = "compound") -> np.ndarray:
    """Rate in force at iterations ``0..max_iter``.

    ``compound`` mode applies :func:`lr_step` once per iteration starting with
    iteration 0 (factor 1), so entry 0 is ``lr0`` and entry ``max_iter`` is 0.
    ``poly`` mode is the usual non-compounding ``lr0 * (1 - i/max) ** 0.9``.
    """
    if mode == "poly":
        return np.array([poly_lr(lr0, i, max_iter) for i in range(max_iter + 1)])
    out = []
    lr = lr0
    for i in range(max_iter + 1):
        lr = lr_step(lr, i, max_iter)
        out.append(lr)
    return np.array(out)


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteGradient(f"non-finite gradient in {', '.join(bad[:5])}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(net: Network, opt: Adam, lr: float):
    opt.step(net.params, net.grads, lr)


@dataclass(frozen=True, eq=False)
class Case:
    case_id: str
    domain: str
    image: np.ndarray
    label: np.ndarray
    spacing: Tuple[float, float, float]


def load_dataset(manifest_path, target: str = "lesion", domains: Sequence[str] = ()) -> List[Case]:
    rows = io.read_manifest(manifest_path)
    cases = []
    for row in rows:
        if domains and row.domain not in domains:
            continue
        vol = io.read_dsv1(io.resolve(manifest_path, row.volume_path), Volume)
        lab_path = row.lesion_path if target == "lesion" else row.organ_path
        lab = io.read_dsv1(io.resolve(manifest_path, lab_path), Mask)
        cases.append(Case(row.case_id, row.domain, np.asarray(vol.data, np.float64), lab.data, vol.spacing))
    if not cases:
        raise ValueError("dataset is empty")
    return cases


def sample_patch(case: Case, patch: Sequence[int], fg_prob: float, rng: np.random.Generator):
    """Crop a patch, centred on a random label voxel with probability ``fg_prob``."""
    dims = np.array(case.image.shape)
    p = np.array(patch)
    img, lab = case.image, case.label
    if np.any(dims < p):
        pad = [(0, int(max(0, q - n))) for n, q in zip(dims, p)]
        img = np.pad(img, pad, mode="edge")
        lab = np.pad(lab, pad)
        dims = np.array(img.shape)
    fg = np.flatnonzero(lab)
    if len(fg) and rng.random() < fg_prob:
        center = np.array(np.unravel_index(fg[rng.integers(len(fg))], lab.shape))
    else:
        center = np.array([rng.integers(n) for n in dims])
    lo = np.clip(center - p // 2, 0, dims - p)
    sl = tuple(slice(a, a + q) for a, q in zip(lo, p))
    return img[sl], lab[sl]


@dataclass
class StepRecord:
    iter: int
    report: LossReport
    lr: float

    def row(self):
        r = self.report
        return (self.iter, r.seg, r.dis, r.tran, r.con, r.cos, r.all, self.lr)


def train_step(net: Network, opt: Adam, cfg: TrainConfig, x: Volume, y: Mask, seed_seq, lr: float) -> LossReport:
    geo_seed, pair_seed, draw_seed = seed_seq.spawn(3)
    plan = geometric_plan(geo_seed, cfg.p_rotate, cfg.p_mirror, cfg.p_noise, cfg.max_angle)
    x, y = apply_plan(x, y, plan, cfg.noise_frac)
    pair = make_pair(x, pair_seed, label=y)
    net.train()
    outs = net.forward_batch(np.stack([pair.x_phi.data, pair.x_varphi.data]))
    M = signed_distance_map(y, cfg.cap_mm).data
    C = slice_labels(y)
    samples = None
    if "con" in ARMS[cfg.arm]:
        cells = cell_classes(y, net.cfg.factor, cfg.erosion, cfg.ring)
        try:
            samples = draw_samples([o.features for o in outs], cells, cfg.B, draw_seed)
        except NoTumorInPatch:
            samples = None
    try:
        rep = total_loss(outs, y.data, M, C, samples, cfg.arm, cfg.k, cfg.tau)
    except DegenerateFeature:
        # an all-zero projection vector has no direction; drop the contrastive term for this step
        log.debug("zero feature vector in sampled cells; contrastive term skipped")
        rep = total_loss(outs, y.data, M, C, None, cfg.arm, cfg.k, cfg.tau)
    net.zero_grad()
    net.backward(rep.grads)
    opt.step(net.params, net.grads, lr)
    return rep


def train(cfg: TrainConfig, dataset: Sequence[Case], net_cfg: NetworkConfig,
          net: Optional[Network] = None) -> Tuple[Network, List[StepRecord]]:
    """Run ``max_iter`` steps (or ``epochs * len(dataset)`` when epochs > 0)."""
    if not dataset:
        raise ValueError("dataset is empty")
    max_iter = cfg.epochs * len(dataset) if cfg.epochs > 0 else cfg.max_iter
    net = net if net is not None else Network(net_cfg)
    net.check_dims(cfg.patch)
    opt = Adam(net.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    lr = cfg.lr
    records = []
    for it in range(max_iter):
        lr = lr_step(lr, it, max_iter) if cfg.lr_mode == "compound" else poly_lr(cfg.lr, it, max_iter)
        ss = np.random.SeedSequence([cfg.seed, it])
        pick_seed, patch_seed, step_seed = ss.spawn(3)
        case = dataset[int(np.random.default_rng(pick_seed).integers(len(dataset)))]
        img, lab = sample_patch(case, cfg.patch, cfg.fg_prob, np.random.default_rng(patch_seed))
        rep = train_step(net, opt, cfg, Volume(img, case.spacing), Mask(lab, case.spacing), step_seed, lr)
        records.append(StepRecord(it, rep, lr))
        if it % 50 == 0:
            log.info("iter %d loss %.4f lr %.3g", it, rep.all, lr)
    net.eval()
    return net, records


def write_loss_log(records: Sequence[StepRecord], path) -> Path:
    return io.write_csv(path, LOSS_LOG_HEADER, [r.row() for r in records])
