"""Training objective: BCE on the standpoint head, Gaussian-reweighted focal
loss on the facing head, and the cosine weight annealing between them.

Everything consumes raw logits and returns (loss, gradient) pairs with
hand-derived closed-form gradients; there is no autodiff here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy.special import expit, log_expit

from .errors import ShapeMismatch, StepOutOfRange
from .heatmap import Heatmap


@dataclass(frozen=True)
class LossWeights:
    w_nav: float
    w_fac: float

    def __post_init__(self):
        if self.w_nav < 0 or self.w_fac < 0:
            raise ValueError("loss weights must be >= 0")
        if self.w_nav == 0 and self.w_fac == 0:
            raise ValueError("loss weights must not both be zero")


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("focal exponents must be >= 0")


@dataclass(frozen=True)
class AnnealSchedule:
    total_steps: int
    fac_start_weight: float = 1.0
    fac_end_weight: float = 0.1
    decay_start_fraction: float = 0.7

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 <= self.decay_start_fraction <= 1.0:
            raise ValueError("decay_start_fraction must lie in [0, 1]")
        if self.fac_start_weight < 0 or self.fac_end_weight < 0:
            raise ValueError("weights must be >= 0")
        if self.fac_end_weight > self.fac_start_weight:
            raise ValueError("fac_end_weight must not exceed fac_start_weight")


def _as_values(gt: Union[Heatmap, np.ndarray]) -> np.ndarray:
    if isinstance(gt, Heatmap):
        return gt.values.astype(np.float64)
    return np.asarray(gt, dtype=np.float64)


def _check_shapes(logits: np.ndarray, gt: np.ndarray) -> None:
    if logits.shape != gt.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs ground truth {gt.shape}")


def bce_nav(logits: np.ndarray, gt: Union[Heatmap, np.ndarray]) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy over all pixels, on logits.

    Uses the overflow-free form max(z,0) - z*y + log1p(exp(-|z|)) so large
    logits neither overflow nor lose the gradient.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = _as_values(gt)
    _check_shapes(z, y)
    n = z.size
    per_pixel = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per_pixel.sum() / n)
    grad = (expit(z) - y) / n
    return loss, grad


def focal_fac(
    logits: np.ndarray, gt: Union[Heatmap, np.ndarray], params: FocalParams = FocalParams()
) -> Tuple[float, np.ndarray]:
    """Gaussian-reweighted focal loss: pixels with g >= 0.5 count as positives.

    Normalized by the positive count (1 when the sample is all-negative so
    zero-target maps stay finite).
    """
    z = np.asarray(logits, dtype=np.float64)
    g = _as_values(gt)
    _check_shapes(z, g)
    a, b = params.alpha, params.beta
    p = expit(z)
    q = expit(-z)  # 1 - p without cancellation
    log_p = log_expit(z)
    log_q = log_expit(-z)
    pos = g >= 0.5
    n_pos = max(int(pos.sum()), 1)
    terms = np.where(pos, q**a * log_p, (1.0 - g) ** b * p**a * log_q)
    loss = float(-terms.sum() / n_pos)
    grad_pos = a * p * q**a * log_p - q ** (a + 1.0)
    grad_neg = (1.0 - g) ** b * (p ** (a + 1.0) - a * p**a * q * log_q)
    grad = np.where(pos, grad_pos, grad_neg) / n_pos
    return loss, grad


def combined_loss(
    nav_logits: np.ndarray,
    nav_gt: Union[Heatmap, np.ndarray],
    fac_logits: np.ndarray,
    fac_gt: Union[Heatmap, np.ndarray],
    weights: LossWeights,
    params: FocalParams = FocalParams(),
) -> Tuple[float, Tuple[np.ndarray, np.ndarray]]:
    """Weighted sum of the two heads; gradients scale with their weights."""
    l_nav, g_nav = bce_nav(nav_logits, nav_gt)
    l_fac, g_fac = focal_fac(fac_logits, fac_gt, params)
    loss = weights.w_nav * l_nav + weights.w_fac * l_fac
    return float(loss), (weights.w_nav * g_nav, weights.w_fac * g_fac)


def anneal(step: int, schedule: AnnealSchedule) -> LossWeights:
    """Facing weight: flat, then cosine decay over the tail of training.

    The standpoint weight stays pinned at 1.
    """
    if not 0 <= step <= schedule.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {schedule.total_steps}]")
    start = schedule.fac_start_weight
    end = schedule.fac_end_weight
    decay_start = schedule.decay_start_fraction * schedule.total_steps
    if step < decay_start:
        return LossWeights(1.0, start)
    window = schedule.total_steps - decay_start
    if window <= 0:
        return LossWeights(1.0, end)
    phase = (step - decay_start) / window
    w_fac = end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * phase))
    return LossWeights(1.0, w_fac)
