"""Report figures written straight to files (headless backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalReport  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pr_curves(report: EvalReport, path, threshold: float | None = None) -> Path:
    """Precision/recall per class at one tIoU threshold (the middle one by default)."""
    if threshold is None:
        threshold = report.thresholds[len(report.thresholds) // 2]
    fig, ax = plt.subplots(figsize=(5, 4))
    for c in report.classes:
        if (c, threshold) not in report.pr_curves:
            continue
        recall, precision = report.pr_curves[(c, threshold)]
        ax.step(recall, precision, where="post",
                label=f"class {c} (AP {100 * report.ap[(c, threshold)]:.1f})")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"tIoU {threshold:g}: mAP {100 * report.map_per_threshold[threshold]:.1f}")
    if report.classes:
        ax.legend(fontsize=8, loc="lower left")
    return _save(fig, path)


def plot_loss_curve(history: Sequence[Mapping], path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("loss", "cls", "reg"):
        ax.plot(epochs, [h[key] for h in history], marker=".", label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, path)


def plot_ablation(rows: Mapping[str, EvalReport], path) -> Path:
    """mAP against tIoU threshold, one line per labelled run."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, rep in rows.items():
        ax.plot(rep.thresholds, [100 * rep.map_per_threshold[t] for t in rep.thresholds],
                marker="o", label=f"{label} (avg {100 * rep.average_map:.1f})")
    ax.set_xlabel("tIoU threshold")
    ax.set_ylabel("mAP (%)")
    ax.legend(fontsize=8)
    return _save(fig, path)
