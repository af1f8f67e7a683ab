"""Figure rendering for run reports.

All figures are written straight to files (Agg backend); nothing is shown
interactively.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .losses import warmup_lambda
from .trainer import poly_lr, read_training_log

FIGURE_DPI = 130


def schedule_series(
    t_max: int, base_lr: float = 0.1, power: float = 0.9, points: int = 512
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample the warmup and learning-rate schedules over [0, t_max]."""
    ts = np.unique(np.linspace(0, t_max, points, dtype=np.int64))
    lambdas = np.array([warmup_lambda(int(t), t_max) for t in ts])
    lrs = np.array([poly_lr(int(t), t_max, base_lr, power) for t in ts])
    return ts, lambdas, lrs


def plot_schedules(t_max: int, out_path: Path | str, base_lr: float = 0.1, power: float = 0.9) -> Path:
    ts, lambdas, lrs = schedule_series(t_max, base_lr, power)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].plot(ts, lambdas, color="tab:purple")
    axes[0].set_title("consistency weight $\\lambda(t)$")
    axes[0].set_xlabel("iteration")
    axes[1].plot(ts, lrs, color="tab:orange")
    axes[1].set_title("poly learning rate")
    axes[1].set_xlabel("iteration")
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=FIGURE_DPI)
    plt.close(fig)
    return out_path


def plot_training_curves(log_path: Path | str, out_path: Path | str) -> Path:
    """Loss components over iterations, with a smoothed overlay."""
    cols = read_training_log(log_path)
    it = cols["iteration"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))

    def smooth(y: np.ndarray, width: int = 25) -> np.ndarray:
        if y.size < 2 * width:
            return y
        kernel = np.ones(width) / width
        return np.convolve(y, kernel, mode="same")

    axes[0].plot(it, cols["total"], alpha=0.25, color="tab:blue")
    axes[0].plot(it, smooth(cols["total"]), color="tab:blue", label="total")
    axes[0].plot(it, smooth(cols["seg"]), color="tab:green", label="supervised")
    axes[0].set_title("loss")
    axes[0].set_xlabel("iteration")
    axes[0].legend()
    axes[1].plot(it, smooth(cols["spcc"]), color="tab:red", label="self-aware")
    axes[1].plot(it, smooth(cols["cpcc"]), color="tab:brown", label="cross-sample")
    axes[1].set_title("consistency terms (unweighted)")
    axes[1].set_xlabel("iteration")
    axes[1].legend()
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=FIGURE_DPI)
    plt.close(fig)
    return out_path


def plot_val_history(val_path: Path | str, out_path: Path | str) -> Path:
    cols = read_training_log(val_path)  # same csv column format
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(cols["iteration"], cols["val_dsc"], marker="o", ms=3, color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("val DSC (%)")
    ax.set_title("validation Dice")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=FIGURE_DPI)
    plt.close(fig)
    return out_path


def plot_ablation(rows: list[dict], out_path: Path | str) -> Path:
    """Horizontal bar chart of mean DSC per ablation row."""
    names = [r["row"] for r in rows]
    dscs = [float(r["val_dsc"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 0.6 * len(rows) + 1.6))
    ypos = np.arange(len(rows))
    ax.barh(ypos, dscs, color="tab:blue", alpha=0.85)
    ax.set_yticks(ypos, names)
    ax.invert_yaxis()
    ax.set_xlabel("val DSC (%)")
    ax.set_title("ablation")
    for y, d in zip(ypos, dscs):
        ax.text(d + 0.3, y, f"{d:.2f}", va="center", fontsize=9)
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=FIGURE_DPI)
    plt.close(fig)
    return out_path


def plot_overlays(
    images: np.ndarray,
    predictions: np.ndarray,
    labels: np.ndarray | None,
    out_path: Path | str,
    max_panels: int = 6,
) -> Path:
    """Side-by-side image / prediction (/ label) panels for spot checks.

    images: (N, H, W) float, predictions/labels: (N, H, W) integer class maps.
    """
    n = min(max_panels, images.shape[0])
    ncols = 3 if labels is not None else 2
    fig, axes = plt.subplots(n, ncols, figsize=(2.6 * ncols, 2.6 * n), squeeze=False)
    for i in range(n):
        axes[i][0].imshow(images[i], cmap="gray")
        axes[i][0].set_title("image" if i == 0 else "")
        axes[i][1].imshow(images[i], cmap="gray")
        axes[i][1].imshow(np.ma.masked_equal(predictions[i], 0), cmap="autumn", alpha=0.55, interpolation="nearest")
        axes[i][1].set_title("prediction" if i == 0 else "")
        if labels is not None:
            axes[i][2].imshow(images[i], cmap="gray")
            axes[i][2].imshow(np.ma.masked_equal(labels[i], 0), cmap="winter", alpha=0.55, interpolation="nearest")
            axes[i][2].set_title("reference" if i == 0 else "")
        for ax in axes[i]:
            ax.set_axis_off()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=FIGURE_DPI)
    plt.close(fig)
    return out_path
