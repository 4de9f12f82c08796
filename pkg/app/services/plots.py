"""
Plots. Every figure is saved as PNG next to the CSV holding its data.
"""

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from app.schemas.corpus import FramePair  # noqa: E402
from app.schemas.probe import FlowPrediction  # noqa: E402


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_curve(
    frame: pd.DataFrame,
    x: str,
    ys: Sequence[str],
    stem: Path,
    title: str = "",
    logy: bool = False,
    xlabel: Optional[str] = None,
) -> Path:
    """Line plot of columns `ys` against `x`; writes `stem`.csv and `stem`.png."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(stem.with_suffix(".csv"), index=False, float_format="%.6f")
    fig, ax = plt.subplots(figsize=(6, 4))
    for y in ys:
        if y in frame and frame[y].notna().any():
            ax.plot(frame[x], frame[y], marker="." if len(frame) < 50 else None, label=y)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel or x)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, stem.with_suffix(".png"))


def plot_loss_curves(history: pd.DataFrame, stem: Path, title: str = "training loss") -> Path:
    return plot_curve(history, "step", ["loss", "val_loss", "flow_error", "val_flow_error"], stem, title, logy=True)


def plot_precision_vs_threshold(frame: pd.DataFrame, stem: Path) -> Path:
    return plot_curve(frame, "threshold", ["fraction"], stem, "fraction of points within threshold",
                      xlabel="threshold (px at eval resolution)")


def plot_ad_vs_frame_gap(frame: pd.DataFrame, stem: Path) -> Path:
    return plot_curve(frame, "frame_gap", ["AD"], stem, "average distance by frame gap")


def plot_probe_overlay(pair: FramePair, predictions: Sequence[FlowPrediction], path: Path) -> Path:
    """Frame 1 with p1 -> p2_hat arrows; occluded points drawn as crosses."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    axes[0].imshow(pair.first.to_uint8())
    axes[1].imshow(pair.second.to_uint8())
    for p in predictions:
        if p.occluded:
            axes[0].plot(p.p1.col, p.p1.row, "rx", markersize=5)
            continue
        axes[0].plot(p.p1.col, p.p1.row, "y.", markersize=4)
        axes[0].annotate(
            "", xy=(p.p2_hat.col, p.p2_hat.row), xytext=(p.p1.col, p.p1.row),
            arrowprops=dict(arrowstyle="->", color="yellow", lw=1),
        )
        axes[1].plot(p.p2_hat.col, p.p2_hat.row, "c.", markersize=4)
    for ax, title in zip(axes, ("frame 1: p1 -> p2", "frame 2: p2")):
        ax.set_title(title)
        ax.axis("off")
    return _save(fig, path)


def plot_perturbation_map(perturbation_map, path: Path) -> Path:
    """
    Two panels: summed amplitude per query point as colour (0.5 = no change)
    and the mean Gaussian width.
    """
    amplitude = perturbation_map.amplitude.sum(axis=2)
    colour = np.clip(0.5 + 0.5 * amplitude, 0.0, 1.0)
    sigma = perturbation_map.sigma.mean(axis=2)
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    axes[0].imshow(colour, interpolation="nearest")
    axes[0].set_title("amplitude")
    image = axes[1].imshow(sigma, cmap="viridis", interpolation="nearest")
    axes[1].set_title("sigma (px)")
    fig.colorbar(image, ax=axes[1], fraction=0.046)
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)
