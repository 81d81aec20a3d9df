"""Figures written next to the text reports: DET curves and training traces."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import norm  # noqa: E402

DET_TICKS = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4]


def _style(ax):
    ax.grid(True, linestyle=":", linewidth=0.6)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)


def plot_det(curves: dict[str, list[tuple[float, float]]], path, eers: dict[str, float] | None = None) -> None:
    """DET curves on normal-deviate axes, one line per system."""
    fig, ax = plt.subplots(figsize=(5, 5))
    lo, hi = norm.ppf(DET_TICKS[0]), norm.ppf(DET_TICKS[-1])
    for name, pts in curves.items():
        pts = np.asarray(pts)
        # clip the 0/1 endpoints so they stay on the axes
        fa = norm.ppf(np.clip(pts[:, 0], 1e-4, 1 - 1e-4))
        miss = norm.ppf(np.clip(pts[:, 1], 1e-4, 1 - 1e-4))
        label = name if not eers or name not in eers else f"{name} (EER {100 * eers[name]:.2f}%)"
        ax.plot(fa, miss, linewidth=1.4, label=label)
    ax.plot([lo, hi], [lo, hi], color="0.6", linewidth=0.8, linestyle="--")
    ticks = norm.ppf(DET_TICKS)
    labels = [f"{100 * t:g}" for t in DET_TICKS]
    ax.set_xticks(ticks, labels)
    ax.set_yticks(ticks, labels)
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    ax.set_xlabel("False alarm rate (%)")
    ax.set_ylabel("Miss rate (%)")
    ax.legend(loc="upper right", fontsize=8, frameon=False)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(history, path) -> None:
    epochs = np.arange(1, len(history.train_loss) + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, history.train_loss, marker="o", markersize=3, label="train")
    ax1.plot(epochs, history.valid_loss, marker="s", markersize=3, label="valid")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("cross-entropy")
    ax1.legend(frameon=False)
    ax2.plot(epochs, history.valid_accuracy, color="C2", marker="o", markersize=3)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation accuracy")
    ax2.set_ylim(0, 1.02)
    for ax in (ax1, ax2):
        _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
