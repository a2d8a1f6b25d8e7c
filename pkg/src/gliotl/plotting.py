"""ROC / PR figures rendered straight to image files (Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_roc(curves: dict[str, tuple[np.ndarray, float]], path) -> Path:
    """``curves`` maps a label to ``(points, auc)`` with points as (thr, fpr, tpr)."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, (pts, auc) in curves.items():
        ax.plot(pts[:, 1], pts[:, 2], drawstyle="default", label=f"{name} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], ls=":", c="grey", lw=1)
    ax.set(xlim=(0, 1), ylim=(0, 1.01), xlabel="False positive rate", ylabel="True positive rate")
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_pr(curves: dict[str, tuple[np.ndarray, float]], path, prevalence: float | None = None) -> Path:
    """Step PR curves; points are (thr, recall, precision)."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, (pts, aupr) in curves.items():
        ax.plot(pts[:, 1], pts[:, 2], drawstyle="steps-pre", label=f"{name} (AUPR {aupr:.3f})")
    if prevalence is not None:
        ax.axhline(prevalence, ls=":", c="grey", lw=1)
    ax.set(xlim=(0, 1), ylim=(0, 1.01), xlabel="Recall", ylabel="Precision")
    ax.legend(loc="lower left", fontsize=8)
    return _save(fig, path)
