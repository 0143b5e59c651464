"""Hard-label evaluation metrics: Dice score and (percentile) Hausdorff distance."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def dice_score(pred_labels, gt_labels, class_id: int) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both are empty."""
    a = np.asarray(pred_labels) == class_id
    b = np.asarray(gt_labels) == class_id
    if a.shape != b.shape:
        raise ValueError(f"label volumes differ in shape: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask (or the volume)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError("boundary expects a 3-D mask")
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return mask & ~eroded


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each src point to its nearest dst point."""
    _, idx = cKDTree(dst).query(src, k=1)
    diff = src - dst[idx]
    return np.sqrt((diff * diff).sum(axis=1))


def hausdorff(pred_labels, gt_labels, class_id: int, spacing=(1.0, 1.0, 1.0), percentile: float = 100.0) -> float:
    """Symmetric Hausdorff distance between 6-connected boundaries in physical units.

    The result is max(P_q(d(A->B)), P_q(d(B->A))) with q = ``percentile``;
    q = 100 is the classic Hausdorff distance, q = 95 the HD95.
    Returns NaN when either mask is empty (reported as such, never as 0).
    """
    a = np.asarray(pred_labels) == class_id
    b = np.asarray(gt_labels) == class_id
    if a.shape != b.shape:
        raise ValueError(f"label volumes differ in shape: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return math.nan
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary(a)) * sp
    pb = np.argwhere(boundary(b)) * sp
    dab = _directed(pa, pb)
    dba = _directed(pb, pa)
    if percentile >= 100:
        return float(max(dab.max(), dba.max()))
    return float(max(np.percentile(dab, percentile), np.percentile(dba, percentile)))


@dataclass
class EvalResult:
    dice: list[float]
    hausdorff: list[float]
    hd95: list[float]
    empty: list[bool] = field(default_factory=list)
    classes: list[int] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else math.nan

    def to_json(self) -> dict:
        def clean(vals):
            return [None if (v is None or math.isnan(v)) else float(v) for v in vals]

        d = asdict(self)
        d["hausdorff"] = clean(self.hausdorff)
        d["hd95"] = clean(self.hd95)
        d["mean_dice"] = self.mean_dice
        return d


def evaluate(pred_labels, gt_labels, num_classes: int, spacing=(1.0, 1.0, 1.0), include_background: bool = False) -> EvalResult:
    classes = list(range(0 if include_background else 1, num_classes))
    res = EvalResult([], [], [], [], classes)
    for c in classes:
        res.dice.append(dice_score(pred_labels, gt_labels, c))
        hd = hausdorff(pred_labels, gt_labels, c, spacing, 100.0)
        hd95 = hausdorff(pred_labels, gt_labels, c, spacing, 95.0)
        res.hausdorff.append(hd)
        res.hd95.append(hd95)
        res.empty.append(math.isnan(hd))
    return res


def mean_foreground_dice(pred_labels, gt_labels, num_classes: int) -> float:
    return float(np.mean([dice_score(pred_labels, gt_labels, c) for c in range(1, num_classes)]))
