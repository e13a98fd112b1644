"""Hybrid cross-entropy + soft Dice loss, its multi-head aggregate, and IoU/Dice metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    smooth_epsilon: float = 1e-6
    ds_weights: Optional[Sequence[float]] = None  # None -> uniform

    def __post_init__(self):
        if self.smooth_epsilon <= 0:
            raise ValueError(f"smooth_epsilon must be > 0, got {self.smooth_epsilon}")
        if self.ds_weights is not None:
            w = np.asarray(self.ds_weights, dtype=np.float64)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"ds_weights must be non-negative and sum to 1, got {list(self.ds_weights)}")

    def weights_for(self, n_heads: int) -> np.ndarray:
        if self.ds_weights is None:
            return np.full(n_heads, 1.0 / n_heads)
        if len(self.ds_weights) != n_heads:
            raise ValueError(f"{len(self.ds_weights)} deep-supervision weights for {n_heads} heads")
        return np.asarray(self.ds_weights, dtype=np.float64)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_target(pred: Tensor, target) -> Tensor:
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if t.shape != pred.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {t.shape}")
    if not np.all((t.data == 0) | (t.data == 1)):
        raise ValueError("target must be binary (values in {0, 1})")
    if t.dtype != pred.dtype:
        t = Tensor(t.data.astype(pred.dtype))
    return t


def bce_dice_loss(pred: Tensor, target, config: LossConfig = LossConfig()) -> Tensor:
    """Scalar ``-mean_b( mean_p(Y log P) / 2 + 2 sum(Y P) / (sum Y + sum P + eps) )``.

    ``pred`` holds probabilities, ``target`` binary masks, both shaped
    (B, ...). Only foreground pixels enter the log term; the log argument is
    clamped at ``eps``. Perfect prediction gives -1.
    """
    target = _check_target(pred, target)
    eps = config.smooth_epsilon
    b = pred.shape[0]
    p = ops.reshape(pred, (b, -1))
    y = ops.reshape(target, (b, -1))
    cross = ops.mul(ops.mean(ops.mul(y, ops.log(p, eps)), axis=1), 0.5)
    inter = ops.sum(ops.mul(y, p), axis=1)
    denom = ops.add(ops.add(ops.sum(y, axis=1), ops.sum(p, axis=1)), eps)
    dice = ops.div(ops.mul(inter, 2.0), denom)
    return ops.mul(ops.mean(ops.add(cross, dice)), -1.0)


def deep_supervision_loss(heads: Sequence[Tensor], target, config: LossConfig = LossConfig()) -> Tensor:
    """Weighted sum of :func:`bce_dice_loss` over the output heads."""
    heads = list(heads)
    if not heads:
        raise ValueError("deep_supervision_loss needs at least one head")
    weights = config.weights_for(len(heads))
    total = None
    for w, h in zip(weights, heads):
        term = bce_dice_loss(h, target, config)
        term = term if w == 1.0 else ops.mul(term, float(w))
        total = term if total is None else ops.add(total, term)
    return total


# -- metrics ---------------------------------------------------------------------

def _binarize(pred, target, threshold):
    p = _as_array(pred)
    t = _as_array(target)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {t.shape}")
    n = p.shape[0] if p.ndim > 1 else 1
    return (p >= threshold).reshape(n, -1), (t >= 0.5).reshape(n, -1)


def iou_per_image(pred, target, threshold: float = 0.5) -> np.ndarray:
    """Per-image Jaccard index; two empty masks score 1."""
    p, t = _binarize(pred, target, threshold)
    inter = np.logical_and(p, t).sum(axis=1)
    union = np.logical_or(p, t).sum(axis=1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def dice_per_image(pred, target, threshold: float = 0.5) -> np.ndarray:
    p, t = _binarize(pred, target, threshold)
    inter = np.logical_and(p, t).sum(axis=1)
    total = p.sum(axis=1) + t.sum(axis=1)
    return np.where(total == 0, 1.0, 2 * inter / np.maximum(total, 1))


def iou(pred, target, threshold: float = 0.5) -> float:
    """Mean IoU over the batch after thresholding ``pred`` at ``threshold``."""
    return float(iou_per_image(pred, target, threshold).mean())


def dice(pred, target, threshold: float = 0.5) -> float:
    return float(dice_per_image(pred, target, threshold).mean())
