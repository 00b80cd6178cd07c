"""Loss-curve and segmentation-overlay figures from emitted run artifacts."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

CLASS_COLORS = {1: (0.1, 0.8, 0.2), 2: (0.15, 0.35, 0.95), 3: (0.95, 0.85, 0.1)}  # MYO, LV, RV


def read_runlog(path) -> dict:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty runlog: {path}")
    cols = {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}
    return cols


def plot_loss_curves(runlog_path, out_dir) -> list:
    """Total-loss curve plus a per-term panel; returns the written paths."""
    cols = read_runlog(runlog_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(cols["step"], cols["total"], lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_title("training objective")
    fig.tight_layout()
    p = out / "loss_total.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)

    terms = ["recon_source", "seg_source", "mi_source", "recon_target", "mi_target", "domain"]
    fig, axes = plt.subplots(2, 3, figsize=(12, 6))
    for ax, term in zip(axes.ravel(), terms):
        if term in cols:
            ax.plot(cols["step"], cols[term], lw=0.8)
        ax.set_title(term)
        ax.set_xlabel("step")
    fig.tight_layout()
    p = out / "loss_terms.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)
    return written


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Class-colored mask blended over a grayscale image; returns an RGB array."""
    rgb = np.repeat(np.clip(image, 0, 1)[:, :, None], 3, axis=2)
    for cls, color in CLASS_COLORS.items():
        sel = mask == cls
        rgb[sel] = (1 - alpha) * rgb[sel] + alpha * np.asarray(color)
    return rgb


def plot_overlays(images, preds, gts, out_dir, max_samples: int = 6) -> list:
    """Side-by-side prediction (and ground-truth when given) overlays."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    n = min(len(images), max_samples)
    for i in range(n):
        ncols = 2 if gts is not None else 1
        fig, axes = plt.subplots(1, ncols, figsize=(4 * ncols, 4), squeeze=False)
        axes[0][0].imshow(overlay(images[i], preds[i]))
        axes[0][0].set_title("prediction")
        if gts is not None:
            axes[0][1].imshow(overlay(images[i], gts[i]))
            axes[0][1].set_title("ground truth")
        for ax in axes.ravel():
            ax.axis("off")
        fig.tight_layout()
        p = out / f"overlay_{i:02d}.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)
    return written
