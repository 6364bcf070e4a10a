"""Figures that accompany the CSV outputs (loss curves, metric spreads, ablation summary).

PNG files are rendered with the Agg backend and written without a software
tag or timestamp, so identical inputs give identical bytes.
"""
from __future__ import annotations

import io as _io
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write  # noqa: E402

LOSS_KEYS = ("seg", "dis", "tran", "con", "cos", "all")


def save_figure(fig, path):
    buf = _io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return atomic_write(path, buf.getvalue())


def plot_loss_curves(rows: Sequence[Mapping[str, float]], path, title: str = "training losses"):
    """``rows`` are loss-log records with the iter/seg/dis/tran/con/cos/all/lr columns."""
    it = np.array([float(r["iter"]) for r in rows])
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(7, 6), sharex=True,
                                    gridspec_kw={"height_ratios": [3, 1]})
    for key in LOSS_KEYS:
        vals = np.array([float(r[key]) for r in rows])
        if np.any(vals != 0):
            ax.plot(it, vals, label=key, lw=1.2 if key == "all" else 0.8)
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    ax_lr.plot(it, [float(r["lr"]) for r in rows], color="k", lw=0.8)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("iteration")
    fig.tight_layout()
    return save_figure(fig, path)


def plot_metrics(rows: Sequence[Mapping[str, str]], path):
    """Per-case DSC, ASD, HD95 and centroid distance, grouped by stage."""
    stages = sorted({r["stage"] for r in rows})
    keys = ("dsc", "asd", "hd95", "centroid_mm")
    fig, axes = plt.subplots(1, len(keys), figsize=(3 * len(keys), 3.5))
    for ax, key in zip(axes, keys):
        data = [[float(r[key]) for r in rows if r["stage"] == s] for s in stages]
        ax.boxplot(data, showfliers=True)
        ax.set_xticks(range(1, len(stages) + 1), stages, rotation=30, fontsize=8)
        ax.set_title(key)
    fig.tight_layout()
    return save_figure(fig, path)


def plot_experiment(summary_rows: Sequence[Mapping], path):
    """Per-seed mean DSC and test-time consistency for each arm."""
    arms = sorted({str(r["arm"]) for r in summary_rows})
    seeds = sorted({int(r["seed"]) for r in summary_rows})
    val: Dict = {(int(r["seed"]), str(r["arm"])): r for r in summary_rows}
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    width = 0.8 / max(1, len(arms))
    x = np.arange(len(seeds))
    for i, arm in enumerate(arms):
        a1.bar(x + i * width, [float(val[s, arm]["mean_dsc"]) for s in seeds], width, label=arm)
        a2.bar(x + i * width, [float(val[s, arm]["mean_consistency"]) for s in seeds], width, label=arm)
    for ax, title in ((a1, "lesion DSC on held-out domain (%)"), (a2, "test-time consistency loss")):
        ax.set_xticks(x + width * (len(arms) - 1) / 2, [str(s) for s in seeds])
        ax.set_xlabel("seed")
        ax.set_title(title, fontsize=10)
        ax.legend(fontsize=8)
    fig.tight_layout()
    return save_figure(fig, path)
