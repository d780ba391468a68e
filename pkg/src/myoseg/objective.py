"""Training losses (soft Jaccard distance, soft Dice) and evaluation metrics.

Loss sums pool over every pixel of the batch, so the gradient of the
batch loss with respect to each predicted probability is a single closed
form. A small smoothing constant keeps value and gradient finite when
both masks are empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass
class LossValue:
    value: float
    dprob: np.ndarray  # gradient w.r.t. each foreground probability


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ShapeError(f"pred shape {pred.shape} != truth shape {truth.shape}")


def jaccard_loss(pred: np.ndarray, truth: np.ndarray,
                 smooth: float = 1e-6) -> LossValue:
    """1 - (sum(p*t) + s) / (sum(p) + sum(t) - sum(p*t) + s), pooled over the batch."""
    _check_pair(pred, truth)
    inter = float((pred * truth).sum())
    p_sum = float(pred.sum())
    t_sum = float(truth.sum())
    num = inter + smooth
    den = p_sum + t_sum - inter + smooth
    value = 1.0 - num / den
    # d/dp_i of 1 - N/D with dN = t_i, dD = 1 - t_i
    dprob = -(truth * den - num * (1.0 - truth)) / (den * den)
    return LossValue(value=value, dprob=dprob.astype(pred.dtype))


def dice_loss(pred: np.ndarray, truth: np.ndarray,
              smooth: float = 1e-6) -> LossValue:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), pooled over the batch."""
    _check_pair(pred, truth)
    inter = float((pred * truth).sum())
    num = 2.0 * inter + smooth
    den = float(pred.sum()) + float(truth.sum()) + smooth
    value = 1.0 - num / den
    dprob = -(2.0 * truth * den - num) / (den * den)
    return LossValue(value=value, dprob=dprob.astype(pred.dtype))


LOSS_FUNCTIONS = {"jaccard": jaccard_loss, "dice": dice_loss}


def _check_binary(mask: np.ndarray, name: str) -> None:
    if not np.isin(mask, (0, 1)).all():
        raise ParameterError(f"{name} must be strictly binary")


def dice_coefficient(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|) on binary masks; 1.0 when both are empty."""
    _check_pair(pred, truth)
    _check_binary(pred, "pred")
    _check_binary(truth, "truth")
    a = float(pred.sum())
    b = float(truth.sum())
    if a == 0.0 and b == 0.0:
        return 1.0
    return 2.0 * float((pred * truth).sum()) / (a + b)


def mse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean over all pixels of (p - t)^2."""
    _check_pair(pred, truth)
    d = pred.astype(np.float64) - truth.astype(np.float64)
    return float(np.mean(d * d))


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean over all pixels of |p - t|."""
    _check_pair(pred, truth)
    d = pred.astype(np.float64) - truth.astype(np.float64)
    return float(np.mean(np.abs(d)))
