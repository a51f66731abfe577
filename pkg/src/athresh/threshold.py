"""Learnable two-level segmentation thresholds.

The dataset threshold is a single logit ``t_d``; the image threshold adds a
per-image offset projected from the threshold-token embedding:

    t_D = sigmoid(t_d)
    t_I = sigmoid(t_d + <proj_w, t_out[b]> + proj_b)

Training uses the smooth step 1 / (1 + exp(-k (m - t))) in place of the hard
indicator [m > t] so gradients reach both the map and the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64
from .tensor import ShapeError, Tensor, as_tensor, broadcast_to, matmul, reshape, sigmoid

DEFAULT_K = 50.0


@dataclass
class ThresholdParams:
    t_d: Tensor
    t_in: Tensor
    proj_w: Tensor
    proj_b: Tensor
    k: float = DEFAULT_K

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"step steepness k must be positive, got {self.k}")

    @classmethod
    def init(cls, channels: int, rng: SplitMix64 | None = None, k: float = DEFAULT_K) -> "ThresholdParams":
        """t_d = 0 (t_D = 0.5); token and projection uniform in +-1/sqrt(C)."""
        bound = 1.0 / np.sqrt(channels)
        if rng is None:
            t_in = np.zeros(channels)
            proj_w = np.zeros(channels)
        else:
            t_in = rng.uniform_array(channels, -bound, bound)
            proj_w = rng.uniform_array(channels, -bound, bound)
        return cls(
            t_d=Tensor(0.0, requires_grad=True),
            t_in=Tensor(t_in, requires_grad=True),
            proj_w=Tensor(proj_w, requires_grad=True),
            proj_b=Tensor(0.0, requires_grad=True),
            k=k,
        )

    @property
    def channels(self) -> int:
        return self.t_in.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {"t_d": self.t_d, "t_in": self.t_in, "proj_w": self.proj_w, "proj_b": self.proj_b}


def dataset_threshold(params: ThresholdParams) -> Tensor:
    return sigmoid(params.t_d)


def image_threshold(params: ThresholdParams, t_out: Tensor) -> Tensor:
    """Per-image thresholds, shape (B,), from token embeddings t_out (B x C)."""
    t_out = as_tensor(t_out)
    C = params.channels
    if t_out.ndim != 2 or t_out.shape[1] != C:
        raise ShapeError(f"t_out must be B x {C}, got {t_out.shape}")
    B = t_out.shape[0]
    offset = reshape(matmul(t_out, reshape(params.proj_w, (C, 1))), (B,))
    logit = offset + broadcast_to(reshape(params.t_d + params.proj_b, (1,)), (B,))
    return sigmoid(logit)


def _per_image(t, shape: tuple[int, ...]) -> Tensor:
    t = as_tensor(t)
    if t.size == 1:
        return t
    if t.ndim != 1 or t.shape[0] != shape[0]:
        raise ShapeError(f"per-image threshold of shape {t.shape} does not match map batch {shape}")
    return broadcast_to(reshape(t, (t.shape[0],) + (1,) * (len(shape) - 1)), shape)


def step(m, t, k: float = DEFAULT_K) -> Tensor:
    """Smooth binarization; ``t`` is a scalar or one value per leading-axis image."""
    m = as_tensor(m)
    return sigmoid((m - _per_image(t, m.shape)) * float(k))


def binarize(m, t) -> np.ndarray:
    """Hard mask m > t (ties go to background). ``t`` scalar or per image."""
    m = m.data if isinstance(m, Tensor) else np.asarray(m)
    t = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if t.size > 1:
        t = t.reshape((-1,) + (1,) * (m.ndim - 1))
    return m > t
