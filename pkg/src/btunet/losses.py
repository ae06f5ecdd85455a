"""Supervised segmentation losses with gradients.

All losses take a binary ground-truth array `y` and a predicted
probability tensor `p` of the same shape, and return a scalar Tensor
(call `.backward()` for dL/dp). Cross-entropy is averaged per pixel so
it stays on the same scale as the dice term at any resolution.
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from .engine import Tensor, as_tensor
from .errors import ShapeError

BCE_EPS = 1e-7
DICE_SMOOTH = 1e-6


def _validate_pair(y: np.ndarray, p: Tensor) -> None:
    if y.shape != p.data.shape:
        raise ShapeError(f"mask/prediction shape mismatch: {y.shape} vs {p.data.shape}")
    if not np.isfinite(p.data).all():
        raise ValueError("predictions contain NaN or Inf")
    if p.data.min() < 0.0 or p.data.max() > 1.0:
        raise ValueError("predictions must lie in [0, 1]")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("ground-truth mask must be binary")


def bce_loss(y, p) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [eps, 1-eps]."""
    p = as_tensor(p)
    y = np.asarray(y, dtype=p.data.dtype)
    _validate_pair(y, p)
    pc = E.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    yt = Tensor(y)
    ll = yt * E.log(pc) + (1.0 - yt) * E.log(1.0 - pc)
    return -ll.mean()


def dice_loss(y, p) -> Tensor:
    """1 - soft dice overlap; denominator smoothed, so defined everywhere."""
    p = as_tensor(p)
    y = np.asarray(y, dtype=p.data.dtype)
    _validate_pair(y, p)
    yt = Tensor(y)
    intersection = (yt * p).sum()
    denom = (yt * yt).sum() + (p * p).sum() + DICE_SMOOTH
    return 1.0 - (intersection * 2.0) / denom


def combined_loss(y, p) -> Tensor:
    """Equal-weight average of cross-entropy and dice losses."""
    return bce_loss(y, p) * 0.5 + dice_loss(y, p) * 0.5
