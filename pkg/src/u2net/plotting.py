"""Report figures written to files (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_pr_curve(curve, path, label: str = "model") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot(curve.recall, curve.precision, lw=1.5, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    return _save(fig, path)


def plot_cost_curve(curve, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    m = np.asarray(curve.m_values)
    for kind, values in curve.series.items():
        ax.plot(m, np.asarray(values) / 1e9, marker="o", ms=3, label=kind)
    ax.set_xlabel("internal channels M")
    ax.set_ylabel("GFLOPs")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_loss(history: Sequence, path, window: int = 100) -> Path:
    it = np.array([h[0] for h in history])
    loss = np.array([h[1] for h in history])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(it, loss, lw=0.6, alpha=0.5, label="loss")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(it[window - 1:], smooth, lw=1.5, label=f"{window}-iteration mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)
