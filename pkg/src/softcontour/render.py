"""Matplotlib rendering of overlays, evolution frames, and report figures.

Overlays are written at the exact pixel size of the underlying image so the
contour line width is meaningful in pixels; report figures (loss curves,
score histograms) use ordinary figure sizing.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

OVERLAY_DPI = 100
FRAME_PATTERN = "frame_%05d.png"


def _pixel_exact_figure(h, w):
    fig = plt.figure(figsize=(w / OVERLAY_DPI, h / OVERLAY_DPI), dpi=OVERLAY_DPI)
    ax = fig.add_axes([0.0, 0.0, 1.0, 1.0])
    ax.set_axis_off()
    return fig, ax


def save_overlay(image, contours, path, line_width_px=2.0, color="red") -> None:
    """Render the image with closed contours drawn ``line_width_px`` wide."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    fig, ax = _pixel_exact_figure(h, w)
    ax.imshow(image, extent=(0.0, 1.0, 1.0, 0.0), aspect="auto",
              interpolation="nearest", cmap="gray" if image.ndim == 2 else None,
              vmin=0.0 if image.ndim == 2 else None,
              vmax=1.0 if image.ndim == 2 else None)
    lw_points = line_width_px * 72.0 / OVERLAY_DPI
    for nodes in contours:
        closed = np.concatenate([nodes, nodes[:1]], axis=0)
        ax.plot(closed[:, 0], closed[:, 1], color=color, linewidth=lw_points)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(1.0, 0.0)
    fig.savefig(path, dpi=OVERLAY_DPI)
    plt.close(fig)


def save_frames(image, snapshots, out_dir, line_width_px=2.0) -> list:
    """One overlay per (epoch, nodes) snapshot, named frame_%05d.png."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for epoch, nodes in snapshots:
        path = os.path.join(out_dir, FRAME_PATTERN % epoch)
        save_overlay(image, [nodes], path, line_width_px=line_width_px)
        paths.append(path)
    return paths


def save_loss_curve(trace, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(trace.losses, label="loss")
    ax2 = ax.twinx()
    ax2.semilogy(trace.grad_norms, color="tab:orange", label="gradient norm")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2.set_ylabel("gradient norm")
    ax.set_title(f"evolution ({trace.status}, {trace.n_epochs} epochs)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_score_histogram(scores, threshold, path, labels=None) -> None:
    """Histogram of candidate scores with the decision threshold marked."""
    scores = np.asarray(scores, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    if labels is not None and len(labels):
        labels = np.asarray(labels, dtype=bool)
        bins = np.histogram_bin_edges(scores, bins=20)
        ax.hist(scores[labels], bins=bins, alpha=0.6, label="positive")
        ax.hist(scores[~labels], bins=bins, alpha=0.6, label="negative")
        ax.legend()
    else:
        ax.hist(scores, bins=20, alpha=0.8)
    if threshold is not None:
        ax.axvline(threshold, color="red", linestyle="--", label="threshold")
    ax.set_xlabel("similarity score")
    ax.set_ylabel("candidates")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
