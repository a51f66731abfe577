"""Adaptive Threshold Loss: pixel cross-entropy plus dice on step-binarized maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DegenerateInputError, ShapeError, Tensor, as_tensor, clamp, log
from .threshold import DEFAULT_K, step

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")


def _check_pair(m: Tensor, gt: Tensor) -> None:
    if m.shape != gt.shape:
        raise ShapeError(f"prediction {m.shape} and ground truth {gt.shape} differ")


def scel(m, gt, eps: float = PROB_EPS) -> Tensor:
    """Mean binary cross-entropy over every pixel, probabilities clamped to [eps, 1-eps]."""
    m, gt = as_tensor(m), as_tensor(gt)
    _check_pair(m, gt)
    p = clamp(m, eps, 1.0 - eps)
    ll = gt * log(p) + (1.0 - gt) * log(1.0 - p)
    return -ll.mean()


def dice(x, y, axes=None) -> Tensor:
    """1 - 2 sum(xy) / (sum(x) + sum(y)).

    ``axes=None`` gives a scalar; passing the spatial axes yields one value per
    image. Raises when a denominator is zero.
    """
    x, y = as_tensor(x), as_tensor(y)
    _check_pair(x, y)
    inter = (x * y).sum(axis=axes)
    denom = x.sum(axis=axes) + y.sum(axis=axes)
    if np.any(denom.data == 0):
        raise DegenerateInputError("dice undefined: both inputs are all zero")
    return 1.0 - 2.0 * inter / denom


def ath_loss(m, gt, t_D, t_I, weights: LossWeights = LossWeights(), k: float = DEFAULT_K) -> Tensor:
    """SCEL(m, gt) + alpha * dice(step(m, t_D), gt) + beta * dice(step(m, t_I), gt).

    For a batch (B x h x w) the thresholds may be per image and the dice terms
    are averaged over images; zero-weight terms are skipped entirely.
    """
    m, gt = as_tensor(m), as_tensor(gt)
    loss = scel(m, gt)
    axes = tuple(range(1, m.ndim)) if m.ndim == 3 else None
    for w, t in ((weights.alpha, t_D), (weights.beta, t_I)):
        if w:
            loss = loss + w * dice(step(m, t, k), gt, axes=axes).mean()
    return loss


def instance_ath_loss(m, instance_masks, t_D, t_I, weights: LossWeights = LossWeights(),
                      k: float = DEFAULT_K, pad: int = 2) -> Tensor:
    """Mean per-instance loss on crops around each ground-truth instance (h x w map).

    Each crop is the instance's bounding box grown by ``pad`` pixels; the
    target inside the crop is that instance's mask alone.
    """
    m = as_tensor(m)
    H, W = m.shape
    terms = []
    for mask in instance_masks:
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            continue
        y0, y1 = max(ys.min() - pad, 0), min(ys.max() + 1 + pad, H)
        x0, x1 = max(xs.min() - pad, 0), min(xs.max() + 1 + pad, W)
        crop = m[y0:y1, x0:x1]
        terms.append(ath_loss(crop, mask[y0:y1, x0:x1].astype(np.float64), t_D, t_I, weights, k))
    if not terms:
        raise DegenerateInputError("instance loss needs at least one ground-truth instance")
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / float(len(terms))
