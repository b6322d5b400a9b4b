"""Reconstruction and segmentation objectives as fused graph ops."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autonet import Tensor, _node, as_tensor
from .errors import ShapeMismatch

DEFAULT_LAMBDA = 0.2
DEFAULT_EPSILON = 1e-8
DICE_SMOOTH = 1e-5


@dataclass
class LossBreakdown:
    masked_term: float
    visible_term: float
    total: float
    lam: float = DEFAULT_LAMBDA
    epsilon: float = DEFAULT_EPSILON
    node: Tensor | None = None


def recon_loss(x_rec, x, mask, lam: float = DEFAULT_LAMBDA, epsilon: float = DEFAULT_EPSILON) -> LossBreakdown:
    """Masked-region MSE plus ``lam`` times visible-region MSE.

    Each term is a sum of squared errors divided by its voxel count plus
    ``epsilon``; the sums run over the whole batch.  ``breakdown.node`` is the
    differentiable scalar total.
    """
    x_rec = as_tensor(x_rec)
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if x_rec.shape != x.shape or m.shape != x.shape:
        raise ShapeMismatch(f"recon_loss: shapes {x_rec.shape}, {x.shape}, {m.shape}")
    if lam < 0 or epsilon < 0:
        raise ValueError("lambda and epsilon must be non-negative")
    diff = x_rec.value - x
    sq = diff * diff
    vis = 1.0 - m
    masked_den = m.sum() + epsilon
    visible_den = vis.sum() + epsilon
    masked_num = (sq * m).sum()
    visible_num = (sq * vis).sum()
    # 0/0 (empty region with epsilon == 0) contributes nothing.
    masked_term = masked_num / masked_den if masked_den > 0 else 0.0
    visible_term = visible_num / visible_den if visible_den > 0 else 0.0
    total = masked_term + lam * visible_term
    w_m = 1.0 / masked_den if masked_den > 0 else 0.0
    w_v = lam / visible_den if visible_den > 0 else 0.0

    def back(g):
        return (g * 2.0 * diff * (m * w_m + vis * w_v),)

    node = _node(np.asarray(total), (x_rec,), back)
    return LossBreakdown(float(masked_term), float(visible_term), float(total), lam, epsilon, node)


def _softplus(z):
    return np.logaddexp(0.0, z)


def dice_ce_loss(logits, labels, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft foreground Dice loss (per sample, batch mean) plus voxel-mean cross-entropy.

    ``logits`` is ``[B, 2, Z, Y, X]`` (background, foreground); ``labels`` is a
    binary ``[B, Z, Y, X]`` array.
    """
    logits = as_tensor(logits)
    g = np.asarray(labels, dtype=np.float64)
    lv = logits.value
    if lv.ndim < 2 or lv.shape[1] != 2 or g.shape != lv.shape[:1] + lv.shape[2:]:
        raise ShapeMismatch(f"dice_ce_loss: logits {lv.shape} vs labels {g.shape}")
    b = lv.shape[0]
    z = lv[:, 1] - lv[:, 0]
    p = np.exp(-_softplus(-z))
    n_vox = z.size
    ce = (g * _softplus(-z) + (1.0 - g) * _softplus(z)).sum() / n_vox

    axes = tuple(range(1, z.ndim))
    inter = (p * g).sum(axis=axes)
    denom = p.sum(axis=axes) + g.sum(axis=axes) + smooth
    dice_loss = (1.0 - (2.0 * inter + smooth) / denom).mean()
    total = dice_loss + ce

    def back(grad):
        shape = (b,) + (1,) * (z.ndim - 1)
        num = (2.0 * inter + smooth).reshape(shape)
        den = denom.reshape(shape)
        d_dice_dp = -(2.0 * g * den - num) / den**2 / b
        dz = d_dice_dp * p * (1.0 - p) + (p - g) / n_vox
        dz = grad * dz
        return (np.stack([-dz, dz], axis=1),)

    return _node(np.asarray(total), (logits,), back)


def dice_ce_terms(logits, labels, smooth: float = DICE_SMOOTH) -> tuple[float, float]:
    """(dice term, cross-entropy term) as plain floats, for reporting."""
    lv = np.asarray(logits.value if isinstance(logits, Tensor) else logits, dtype=np.float64)
    g = np.asarray(labels, dtype=np.float64)
    z = lv[:, 1] - lv[:, 0]
    p = np.exp(-_softplus(-z))
    ce = float((g * _softplus(-z) + (1.0 - g) * _softplus(z)).mean())
    axes = tuple(range(1, z.ndim))
    dice = (2.0 * (p * g).sum(axis=axes) + smooth) / (p.sum(axis=axes) + g.sum(axis=axes) + smooth)
    return float((1.0 - dice).mean()), ce
