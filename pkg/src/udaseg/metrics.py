"""Segmentation quality metrics: Dice overlap and symmetric surface distance.

All metrics operate on 2D integer label maps.  Boundaries use
4-connectivity; pixels on the image border count as boundary when they
belong to the class.  Distances are Euclidean in pixel units scaled by
``spacing``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

FOREGROUND_CLASSES = {1: "MYO", 2: "LV", 3: "RV"}


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Dice overlap in percent: 100 * 2|P & G| / (|P| + |G|).

    Both-empty classes score 100 (perfect agreement on absence); the
    aggregate report tracks how often that happened.
    """
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must share a shape")
    p = pred == class_id
    g = gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * int((p & g).sum()) / denom


def class_empty_in_both(pred: np.ndarray, gt: np.ndarray, class_id: int) -> bool:
    return not (pred == class_id).any() and not (gt == class_id).any()


def boundary_pixels(mask: np.ndarray, class_id: int) -> np.ndarray:
    """Coordinates (N, 2) of class pixels with a 4-neighbor outside the class."""
    binary = mask == class_id
    padded = np.pad(binary, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(binary & ~interior)


def assd(pred: np.ndarray, gt: np.ndarray, class_id: int, spacing: float = 1.0) -> float | None:
    """Average symmetric surface distance between the class boundaries.

    Mean of the two directed average boundary distances, scaled by spacing.
    Returns None (undefined) when the class is empty in either mask; the
    report excludes such samples from the mean and notes the count.
    """
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must share a shape")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    bp = boundary_pixels(pred, class_id)
    bg = boundary_pixels(gt, class_id)
    if len(bp) == 0 or len(bg) == 0:
        return None
    d_pg = cKDTree(bg).query(bp)[0].mean()
    d_gp = cKDTree(bp).query(bg)[0].mean()
    return 0.5 * (d_pg + d_gp) * spacing


@dataclass
class MetricsReport:
    """Per-class and mean Dice (%) / surface distance over an evaluated dataset."""

    per_class: dict
    mean_dice: float
    mean_assd: float | None
    n_samples: int
    spacing: float = 1.0
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            dict(
                per_class=self.per_class, mean_dice=self.mean_dice, mean_assd=self.mean_assd,
                n_samples=self.n_samples, spacing=self.spacing, notes=self.notes,
            ),
            indent=2, sort_keys=True,
        )

    def to_csv_row(self) -> dict:
        row = {"n_samples": self.n_samples, "mean_dice": self.mean_dice, "mean_assd": self.mean_assd}
        for name, vals in self.per_class.items():
            row[f"dice_{name}"] = vals["dice"]
            row[f"assd_{name}"] = vals["assd"]
        return row


def evaluate_masks(preds, gts, spacing: float = 1.0) -> MetricsReport:
    """Aggregate Dice/ASSD over paired label maps, slice-level means per class."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equal, nonzero numbers of predictions and ground truths")
    per_class = {}
    for cls, name in FOREGROUND_CLASSES.items():
        dices, assds, empty, undefined = [], [], 0, 0
        for p, g in zip(preds, gts):
            dices.append(dice(p, g, cls))
            empty += class_empty_in_both(p, g, cls)
            a = assd(p, g, cls, spacing)
            if a is None:
                undefined += 1
            else:
                assds.append(a)
        per_class[name] = dict(
            dice=float(np.mean(dices)),
            assd=float(np.mean(assds)) if assds else None,
            assd_undefined=undefined,
            dice_both_empty=empty,
        )
    mean_dice = float(np.mean([v["dice"] for v in per_class.values()]))
    defined = [v["assd"] for v in per_class.values() if v["assd"] is not None]
    mean_assd = float(np.mean(defined)) if defined else None
    return MetricsReport(
        per_class=per_class, mean_dice=mean_dice, mean_assd=mean_assd,
        n_samples=len(preds), spacing=spacing,
    )
