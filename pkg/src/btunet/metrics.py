"""Segmentation evaluation metrics: precision, dice coefficient, mean IoU.

Pure NumPy functions over binary masks and probability maps. Mean IoU
sweeps ten binarization thresholds 0.50, 0.55, ..., 0.95 (p >= t,
inclusive) and averages the per-threshold IoU values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

THRESHOLD_SWEEP: tuple[float, ...] = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 values")
    return arr.astype(np.float64)


def confusion(y, p_hat) -> ConfusionCounts:
    """Exact confusion counts between two binary masks."""
    y = _as_binary(y, "ground truth")
    p_hat = _as_binary(p_hat, "prediction")
    if y.shape != p_hat.shape:
        raise ShapeError(f"mask shape mismatch: {y.shape} vs {p_hat.shape}")
    tp = int(np.sum((y == 1) & (p_hat == 1)))
    fp = int(np.sum((y == 0) & (p_hat == 1)))
    fn = int(np.sum((y == 1) & (p_hat == 0)))
    tn = int(np.sum((y == 0) & (p_hat == 0)))
    return ConfusionCounts(tp, fp, fn, tn)


def precision(cc: ConfusionCounts) -> float:
    """tp / (tp + fp); 0 when there are no positive predictions."""
    denom = cc.tp + cc.fp
    return cc.tp / denom if denom else 0.0


def dice_coefficient(cc: ConfusionCounts) -> float:
    """2tp / (2tp + fn + fp); 0 when the union is empty.

    The empty/empty convention matches 1 - dice_loss, which evaluates to 0
    there because of its smoothed denominator.
    """
    denom = 2 * cc.tp + cc.fn + cc.fp
    return 2 * cc.tp / denom if denom else 0.0


def iou(cc: ConfusionCounts) -> float:
    """tp / (tp + fn + fp); empty-vs-empty counts as perfect overlap (1)."""
    denom = cc.tp + cc.fn + cc.fp
    return cc.tp / denom if denom else 1.0


def mean_iou(y, p, thresholds: tuple[float, ...] = THRESHOLD_SWEEP) -> float:
    """IoU of (p >= t) against y, averaged over the threshold sweep."""
    y = _as_binary(y, "ground truth")
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"mask/prediction shape mismatch: {y.shape} vs {p.shape}")
    if not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("probabilities must be finite and lie in [0, 1]")
    total = 0.0
    for t in thresholds:
        total += iou(confusion(y, (p >= t).astype(np.float64)))
    return total / len(thresholds)


def evaluate_pair(y, p, threshold: float = 0.5) -> dict[str, float]:
    """Precision and dice at the fixed threshold, plus swept mean IoU."""
    p = np.asarray(p, dtype=np.float64)
    cc = confusion(y, (p >= threshold).astype(np.float64))
    return {
        "precision": precision(cc),
        "dc": dice_coefficient(cc),
        "miou": mean_iou(y, p),
    }
