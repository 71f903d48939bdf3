"""Figures written by the CLI report paths (PNG files, headless backend)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def training_curves(history, path: str | os.PathLike):
    """Train loss and validation scores against epoch."""
    recs = history.records
    ep = [r["epoch"] for r in recs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(ep, [r["train_loss"] for r in recs], marker=".")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    for key in ("f1", "iou", "precision", "recall"):
        ys = [np.nan if r.get(key) is None else r[key] for r in recs]
        if not np.all(np.isnan(ys)):
            ax2.plot(ep, ys, label=key)
    best = history.best_epoch()
    if best is not None:
        ax2.axvline(best, color="k", lw=0.8, ls="--")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1.02)
    ax2.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def flood_map(pre, post, probs, mask, path: str | os.PathLike, label=None):
    """Side-by-side panels: pre, post, probability, binary mask (and label if given)."""
    panels = [("pre", pre, "gray"), ("post", post, "gray"), ("probability", probs, "viridis"),
              ("mask", mask, "Blues")]
    if label is not None:
        panels.append(("label", label, "Blues"))
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.2))
    for ax, (title, img, cmap) in zip(axes, panels):
        img = np.asarray(img)
        if img.ndim == 3:
            img = img[..., 0]
        kw = {"vmin": 0, "vmax": 1} if title in ("probability", "mask", "label") else {}
        ax.imshow(img, cmap=cmap, interpolation="nearest", **kw)
        ax.set_title(title)
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
