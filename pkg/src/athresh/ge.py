"""Global-information Enhanced (GE) block.

The coarsest feature map is flattened to a pixel sequence, a trainable
threshold token is prepended, and the sequence runs through ``repeats``
pre-norm transformer layers:

    x = x + Proj(MHSA(LN(x)) + MaskedLePE(V))
    x = x + FFN(LN(x))

Masked LePE is a depthwise 3x3 convolution over the pixel rows of V laid back
out on the h x w grid; the token row gets no positional term and is not seen
by the convolution. The final sequence is split back into the enhanced map and
the token embedding that drives the image-level threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64
from .tensor import (
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    conv2d,
    layernorm,
    matmul,
    relu,
    reshape,
    softmax,
    split,
    transpose,
)

_MASKED = -1e30


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GEConfig:
    channels: int = 16
    heads: int = 4
    repeats: int = 2
    ffn_ratio: int = 4
    h: int = 16
    w: int = 16

    def __post_init__(self):
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.ffn_ratio < 1:
            raise ConfigError(f"ffn_ratio must be >= 1, got {self.ffn_ratio}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def _uniform(rng: SplitMix64, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    n = int(np.prod(shape))
    return Tensor(rng.uniform_array(n, -bound, bound).reshape(shape), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_ge_params(cfg: GEConfig, rng: SplitMix64) -> dict[str, Tensor]:
    C, F = cfg.channels, cfg.channels * cfg.ffn_ratio
    params: dict[str, Tensor] = {}
    for i in range(cfg.repeats):
        layer = {
            "ln1_g": _ones(C),
            "ln1_b": _zeros(C),
            "qkv_w": _uniform(rng, (C, 3 * C), C),
            "qkv_b": _zeros(3 * C),
            "lepe_w": _uniform(rng, (C, 1, 3, 3), 9),
            "lepe_b": _zeros(C),
            "proj_w": _uniform(rng, (C, C), C),
            "proj_b": _zeros(C),
            "ln2_g": _ones(C),
            "ln2_b": _zeros(C),
            "ffn1_w": _uniform(rng, (C, F), C),
            "ffn1_b": _zeros(F),
            "ffn2_w": _uniform(rng, (F, C), F),
            "ffn2_b": _zeros(C),
        }
        params.update({f"layer{i}.{k}": v for k, v in layer.items()})
    return params


def layer_params(params: dict[str, Tensor], i: int) -> dict[str, Tensor]:
    prefix = f"layer{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + broadcast_to(b, y.shape)


def masked_lepe(v: Tensor, kernel: Tensor, bias: Tensor | None, h: int, w: int) -> Tensor:
    """Positional term for a [token; pixels] sequence (B x (hw+1) x C).

    Row 0 (the token) is identically zero and is excluded from the conv input.
    """
    B, L, C = v.shape
    if L != h * w + 1:
        raise ShapeError(f"sequence length {L} does not match {h}x{w} pixels plus one token")
    _, pixels = split(v, [1, h * w], axis=1)
    grid = transpose(reshape(pixels, (B, h, w, C)), (0, 3, 1, 2))
    pos = conv2d(grid, kernel, bias, padding=1, groups=C)
    pos = reshape(transpose(pos, (0, 2, 3, 1)), (B, h * w, C))
    return concat([Tensor(np.zeros((B, 1, C))), pos], axis=1)


def mhsa(x: Tensor, p: dict[str, Tensor], cfg: GEConfig, ignore_token: bool = False,
         return_weights: bool = False):
    """Multi-head self-attention with Masked LePE, followed by the output projection.

    ``ignore_token`` masks the token's key column so no position attends to it.
    """
    B, L, C = x.shape
    H, d = cfg.heads, cfg.head_dim
    qkv = linear(x, p["qkv_w"], p["qkv_b"])
    q, k, v = split(qkv, [C, C, C], axis=2)

    def heads(t):
        return transpose(reshape(t, (B, L, H, d)), (0, 2, 1, 3))

    scores = matmul(heads(q), transpose(heads(k), (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
    if ignore_token:
        mask = np.zeros((B, H, L, L))
        mask[..., 0] = _MASKED
        scores = scores + Tensor(mask)
    attn = softmax(scores, axis=-1)
    mixed = reshape(transpose(matmul(attn, heads(v)), (0, 2, 1, 3)), (B, L, C))
    mixed = mixed + masked_lepe(v, p["lepe_w"], p["lepe_b"], cfg.h, cfg.w)
    out = linear(mixed, p["proj_w"], p["proj_b"])
    return (out, attn) if return_weights else out


def ffn(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    return linear(relu(linear(x, p["ffn1_w"], p["ffn1_b"])), p["ffn2_w"], p["ffn2_b"])


def ge_layer(x: Tensor, p: dict[str, Tensor], cfg: GEConfig, ignore_token: bool = False) -> Tensor:
    x = x + mhsa(layernorm(x, p["ln1_g"], p["ln1_b"]), p, cfg, ignore_token=ignore_token)
    return x + ffn(layernorm(x, p["ln2_g"], p["ln2_b"]), p)


def ge_forward(c5: Tensor, t_in: Tensor, params: dict[str, Tensor], cfg: GEConfig,
               ignore_token: bool = False) -> tuple[Tensor, Tensor]:
    """Returns (o5: B x C x h x w, t_out: B x C)."""
    if c5.ndim != 4 or c5.shape[1:] != (cfg.channels, cfg.h, cfg.w):
        raise ShapeError(f"expected B x {cfg.channels} x {cfg.h} x {cfg.w} features, got {c5.shape}")
    if t_in.shape != (cfg.channels,):
        raise ShapeError(f"threshold token must have shape ({cfg.channels},), got {t_in.shape}")
    B, C, h, w = c5.shape
    pixels = transpose(reshape(c5, (B, C, h * w)), (0, 2, 1))
    token = broadcast_to(reshape(t_in, (1, 1, C)), (B, 1, C))
    x = concat([token, pixels], axis=1)
    for i in range(cfg.repeats):
        x = ge_layer(x, layer_params(params, i), cfg, ignore_token=ignore_token)
    t_out, pix = split(x, [1, h * w], axis=1)
    o5 = reshape(transpose(pix, (0, 2, 1)), (B, C, h, w))
    return o5, reshape(t_out, (B, C))
