"""Matplotlib figure rendering for the CLI report paths.

Every command that writes delimited output (train loss CSV, eval CSV,
bench JSON) can render a companion PNG next to it.  All rendering uses the
Agg backend so it works headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIG_DPI = 120


def save_loss_curve(steps: Sequence[int], losses: Sequence[float], path,
                    window: int = 100) -> Path:
    """Loss trajectory with a moving average overlay."""
    path = Path(path)
    steps = np.asarray(steps)
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.7, alpha=0.5, label="loss")
    if losses.size >= window:
        kernel = np.ones(window) / window
        ma = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[window - 1:], ma, lw=1.8, label=f"moving avg ({window})")
    ax.set_xlabel("step")
    ax.set_ylabel("MSE loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return path


def save_metrics_figure(rows: Sequence[Sequence], path) -> Path:
    """Bar panels per metric from eval CSV rows (id, kind, smooth, ..., sync_d)."""
    path = Path(path)
    ids = [str(r[0]) for r in rows]
    metric_names = ("smooth", "subject", "background", "sync_c")
    fig, axes = plt.subplots(2, 2, figsize=(10, 6), sharex=True)
    x = np.arange(len(ids))
    for ax, name, col in zip(axes.ravel(), metric_names, range(2, 6)):
        values = [float(r[col]) for r in rows]
        ax.bar(x, values, color="#4878a8")
        ax.set_title(name)
        ax.grid(alpha=0.3, axis="y")
    for ax in axes[1]:
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=90, fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return path


def save_bench_figure(comparison: dict, path) -> Path:
    """Median bars with p10-p90 whiskers for each timed adapter kind."""
    path = Path(path)
    kinds = [r["kind"] for r in comparison["results"]]
    medians = np.array([r["timing"]["median_ns"] for r in comparison["results"]]) / 1e6
    p10 = np.array([r["timing"]["p10_ns"] for r in comparison["results"]]) / 1e6
    p90 = np.array([r["timing"]["p90_ns"] for r in comparison["results"]]) / 1e6
    fig, ax = plt.subplots(figsize=(5, 4))
    x = np.arange(len(kinds))
    ax.bar(x, medians, yerr=[medians - p10, p90 - medians], capsize=6,
           color=["#4878a8", "#a85448"])
    ax.set_xticks(x)
    ax.set_xticklabels(kinds)
    ax.set_ylabel("forward time (ms)")
    improvement = 100.0 * comparison["comparison"]["time_improvement"]
    ax.set_title(f"median improvement: {improvement:.1f}%")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return path


def save_frame_strip(frames: np.ndarray, path, cols: int = 8) -> Path:
    """Contact sheet of a clip's frames ([N, 1, H, W] or [N, H, W])."""
    path = Path(path)
    frames = np.asarray(frames)
    if frames.ndim == 4:
        frames = frames[:, 0]
    n = frames.shape[0]
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(1.2 * cols, 1.2 * rows))
    for i, ax in enumerate(np.atleast_1d(axes).ravel()):
        ax.axis("off")
        if i < n:
            ax.imshow(frames[i], cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_title(str(i), fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return path
