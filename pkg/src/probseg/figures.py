"""Static figure emission for batch runs (loss curves, sample grids)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib import patches

from .data import BoxPrompt
from .training import TrainHistory


def save_loss_curve(history: TrainHistory, path: str | Path) -> None:
    steps = [r.step for r in history.steps]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("total", "bce", "dice", "kl"):
        ax.plot(steps, [getattr(r, key) for r in history.steps], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sample_grid(
    image: np.ndarray,
    box: BoxPrompt,
    annotations: list[np.ndarray] | None,
    samples: np.ndarray,
    path: str | Path,
) -> None:
    """Input with the box, annotator masks (if any), then the drawn samples."""
    n_ann = len(annotations) if annotations else 0
    n_cols = max(1 + n_ann, len(samples))
    n_rows = 2 if n_ann else 2
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.6 * n_cols, 1.6 * n_rows))
    axes = np.atleast_2d(axes)
    for ax in axes.ravel():
        ax.set_axis_off()

    axes[0, 0].imshow(image, cmap="gray", vmin=0, vmax=1)
    axes[0, 0].add_patch(
        patches.Rectangle(
            (box.x1 - 0.5, box.y1 - 0.5), box.x2 - box.x1, box.y2 - box.y1,
            fill=False, edgecolor="tab:orange", linewidth=1.2,
        )
    )
    axes[0, 0].set_title("input", fontsize=8)
    if annotations:
        for k, ann in enumerate(annotations):
            axes[0, 1 + k].imshow(ann, cmap="gray", vmin=0, vmax=1)
            axes[0, 1 + k].set_title(f"annotator {k}", fontsize=8)
    for i, mask in enumerate(samples):
        axes[1, i].imshow(mask, cmap="gray", vmin=0, vmax=1)
        axes[1, i].set_title(f"sample {i}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
