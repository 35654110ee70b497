"""Segmentation losses (focal + dice), IoU regression, and their combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import MaskPrediction
from .tensor import Tensor

__all__ = ["LossWeights", "LossBreakdown", "focal_loss", "dice_loss", "l1_iou_loss", "instance_loss"]


@dataclass
class LossWeights:
    w_focal: float = 20.0
    w_dice: float = 1.0
    w_iou: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if min(self.w_focal, self.w_dice, self.w_iou) < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ValueError(f"focal_alpha must be in [0,1], got {self.focal_alpha}")


@dataclass
class LossBreakdown:
    total: float
    focal: float
    dice: float
    iou: float
    chosen_index: int


def _as_target(target, dtype) -> np.ndarray:
    return (np.asarray(target) != 0).astype(dtype)


def focal_loss(logits: Tensor, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean focal loss over sigmoid pixel logits.

    Per pixel: -alpha_t * (1 - p_t)^gamma * log(p_t), with p_t the predicted
    probability of the true class and alpha_t = alpha on foreground,
    1 - alpha on background.  Evaluated through softplus so large logits
    cannot overflow.
    """
    if gamma < 0:
        raise ValueError(f"focal_loss: gamma must be >= 0, got {gamma}")
    t = _as_target(target, logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"focal_loss: target shape {t.shape} != logits shape {logits.shape}")
    sign = Tensor(2.0 * t - 1.0)
    alpha_t = Tensor(alpha * t + (1.0 - alpha) * (1.0 - t))
    z = T.mul(logits, sign)  # logit of the true class
    ce = T.softplus(T.neg(z))  # -log p_t
    if gamma == 0:
        weighted = T.mul(alpha_t, ce)
    else:
        weighted = T.mul(alpha_t, T.mul(T.power(T.sigmoid(T.neg(z)), gamma), ce))
    return T.tmean(weighted)


def dice_loss(logits: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - soft Dice overlap between sigmoid probabilities and the target."""
    t = _as_target(target, logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"dice_loss: target shape {t.shape} != logits shape {logits.shape}")
    p = T.sigmoid(logits)
    inter = T.tsum(T.mul(p, Tensor(t)))
    denom = T.tsum(p) + float(t.sum()) + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def l1_iou_loss(iou_pred: Tensor, actual_iou) -> Tensor:
    """Mean absolute error between predicted and measured per-candidate IoU."""
    actual = np.asarray(actual_iou, dtype=iou_pred.dtype)
    if actual.shape != iou_pred.shape:
        raise ValueError(f"l1_iou_loss: lengths differ: {iou_pred.shape} vs {actual.shape}")
    diff = T.sub(iou_pred, Tensor(actual))
    return T.tmean(T.absolute(diff))


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def instance_loss(prediction: MaskPrediction, target: np.ndarray, weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Best-candidate segmentation loss plus IoU regression over all candidates.

    The focal+dice term is taken over the candidate minimizing it (computed
    out of graph, ties to the lowest index) and gradients flow only through
    that candidate.  The L1 term supervises every candidate's predicted IoU
    against its measured IoU at the logit resolution.
    """
    n = prediction.mask_logits.shape[0]
    target = (np.asarray(target) != 0).astype(np.uint8)
    with T.no_grad():
        seg_scores = []
        for k in range(n):
            lk = Tensor(prediction.mask_logits.data[k])
            s = weights.w_focal * focal_loss(lk, target, weights.focal_alpha, weights.focal_gamma).item()
            s += weights.w_dice * dice_loss(lk, target).item()
            seg_scores.append(s)
    chosen = int(np.argmin(seg_scores))

    logits_c = prediction.mask_logits[chosen]
    focal_t = focal_loss(logits_c, target, weights.focal_alpha, weights.focal_gamma)
    dice_t = dice_loss(logits_c, target)
    seg = T.add(T.scale(focal_t, weights.w_focal), T.scale(dice_t, weights.w_dice))

    actual = np.array([_mask_iou(prediction.mask_logits.data[k] > 0, target > 0) for k in range(n)])
    iou_t = l1_iou_loss(prediction.iou_pred, actual)
    total = T.add(seg, T.scale(iou_t, weights.w_iou))
    breakdown = LossBreakdown(
        total=total.item(),
        focal=focal_t.item(),
        dice=dice_t.item(),
        iou=iou_t.item(),
        chosen_index=chosen,
    )
    return total, breakdown
