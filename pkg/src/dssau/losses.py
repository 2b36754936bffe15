"""Segmentation losses on per-pixel class probabilities.

Probabilities are ``(B, H, W, K)`` tensors; targets are integer label maps
``(B, H, W)``. Dice is computed per foreground class (1..K-1) over the whole
batch and averaged; cross-entropy is the multi-class form.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, clip, log, softmax
from .errors import DimensionError

DICE_EPS = 1e-6
PROB_CLIP = 1e-7


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    return np.eye(num_classes, dtype=dtype)[labels]


def _check(p: Tensor, g: np.ndarray) -> np.ndarray:
    g = np.asarray(g)
    if p.shape[:-1] != g.shape:
        raise DimensionError(f"prediction extent {p.shape[:-1]} != target extent {g.shape}")
    return one_hot(g, p.shape[-1], p.dtype)


def dice_loss(p: Tensor, g: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    t = _check(p, g)
    axes = tuple(range(p.ndim - 1))
    inter = (p * Tensor(t)).sum(axis=axes)
    denom = p.sum(axis=axes) + Tensor(t.sum(axis=axes))
    per_class = 1.0 - (inter * 2.0 + eps) / (denom + eps)
    return per_class[1:].mean()


def ce_loss(p: Tensor, g: np.ndarray) -> Tensor:
    t = _check(p, g)
    logp = log(clip(p, PROB_CLIP, 1.0 - PROB_CLIP))
    n = int(np.prod(p.shape[:-1]))
    return -(logp * Tensor(t)).sum() / n


def hybrid_loss(p: Tensor, g: np.ndarray) -> Tensor:
    return (dice_loss(p, g) + ce_loss(p, g)) * 0.5


def hybrid_loss_from_logits(logits: Tensor, g: np.ndarray) -> Tensor:
    return hybrid_loss(softmax(logits, axis=-1), g)
