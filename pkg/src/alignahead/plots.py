"""Figures written next to the CSV/JSONL outputs of the CLI."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}
# fixed metadata keeps PNG bytes reproducible across runs
PNG_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def training_curves(report, path) -> Path:
    """Train CE, structure loss and validation metric per student over epochs."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        epochs = sorted({r.epoch for r in report.records})
        for k in range(report.num_students):
            for ax, key in zip(axes, ("ce_loss", "structure_loss", "val_metric")):
                ys = [np.nan if v is None else v for v in report.history(k, key)]
                ax.plot(epochs, ys, label=f"student {k + 1}", lw=1)
        for ax, title in zip(axes, ("train CE", "structure loss", "val metric")):
            ax.set_title(title)
            ax.set_xlabel("epoch")
        axes[-1].legend()
        fig.tight_layout()
        return _save(fig, path)


def alpha_sweep(rows: list[dict], path, key: str = "max_test_metric") -> Path:
    """Best-student metric against alpha, one marker per seed plus the mean."""
    by_alpha = defaultdict(list)
    for r in rows:
        by_alpha[r["alpha"]].append(r[key])
    alphas = sorted(by_alpha)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for a in alphas:
            ax.scatter([a] * len(by_alpha[a]), by_alpha[a], s=10, color="0.6")
        ax.plot(alphas, [np.mean(by_alpha[a]) for a in alphas], marker="o", color="C0", label="mean")
        ax.set_xscale("log")
        ax.set_xlabel("alpha")
        ax.set_ylabel("max student metric")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def strategy_comparison(rows: list[dict], path, key: str = "max_test_metric") -> Path:
    """Grouped bars of mean best-student metric per architecture and strategy."""
    archs = list(dict.fromkeys(r["arch"] for r in rows))
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    width = 0.8 / max(len(strategies), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.8 * len(archs) + 2, 3))
        for s_i, s in enumerate(strategies):
            means, stds = [], []
            for a in archs:
                vals = [r[key] for r in rows if r["arch"] == a and r["strategy"] == s]
                means.append(np.mean(vals))
                stds.append(np.std(vals))
            xs = np.arange(len(archs)) + (s_i - (len(strategies) - 1) / 2) * width
            ax.bar(xs, means, width, yerr=stds, label=s, capsize=2)
        ax.set_xticks(np.arange(len(archs)), archs)
        lo = min(r[key] for r in rows)
        ax.set_ylim(max(0.0, lo - 0.05), 1.0)
        ax.set_ylabel("max student metric")
        ax.legend(ncols=len(strategies))
        fig.tight_layout()
        return _save(fig, path)


def student_scaling(rows: list[dict], path, key: str = "max_test_metric") -> Path:
    by_m = defaultdict(list)
    for r in rows:
        by_m[r["students"]].append(r[key])
    ms = sorted(by_m)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.errorbar(ms, [np.mean(by_m[m]) for m in ms], yerr=[np.std(by_m[m]) for m in ms], marker="o", capsize=2)
        ax.set_xticks(ms)
        ax.set_xlabel("number of students")
        ax.set_ylabel("max student metric")
        fig.tight_layout()
        return _save(fig, path)
