"""Seeded finite-difference checks for every differentiable operation.

Each case builds a small random problem from a seed and returns the scalar
objective plus the tensors to differentiate. Primitive operations are held to
1e-4 relative error, convolution and composite graphs to 1e-3. Inputs are
drawn away from kinks (relu at 0, ties in max, the scel clamp) so central
differences with step 1e-3 are meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .ge import GEConfig, ffn, ge_forward, init_ge_params, layer_params, mhsa
from .loss import LossWeights, ath_loss, dice, scel
from .rng import SplitMix64
from .threshold import ThresholdParams, dataset_threshold, image_threshold, step

FD_STEP = 1e-3
PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


def _t(rng: SplitMix64, shape, low=-1.0, high=1.0) -> T.Tensor:
    n = int(np.prod(shape)) if shape else 1
    return T.Tensor(rng.uniform_array(n, low, high).reshape(shape), requires_grad=True)


def _weights(rng, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return rng.uniform_array(n, -1.0, 1.0).reshape(shape)


def _away_from_zero(rng, shape, gap=0.05) -> T.Tensor:
    n = int(np.prod(shape))
    mag = rng.uniform_array(n, gap, 1.0)
    sign = np.where(rng.uniform_array(n) < 0.5, -1.0, 1.0)
    return T.Tensor((mag * sign).reshape(shape), requires_grad=True)


def _distinct(rng, shape, gap=0.01) -> T.Tensor:
    # a shuffled ladder: every pair differs by >= gap, so max has no near-ties
    n = int(np.prod(shape))
    order = list(range(n))
    rng.shuffle(order)
    vals = (np.asarray(order, dtype=np.float64) * gap * 2) + rng.uniform_array(n, 0, gap)
    return T.Tensor(vals.reshape(shape) - vals.mean(), requires_grad=True)


def _probe(out: T.Tensor, rng) -> T.Tensor:
    # random linear functional keeps every output entry in play
    return (out * T.Tensor(_weights(rng, out.shape))).sum()


@dataclass
class Case:
    name: str
    build: Callable[[SplitMix64], tuple[Callable[[], T.Tensor], list[T.Tensor]]]
    tol: float


def _unary(fn, low=-1.0, high=1.0):
    def build(rng):
        x = _t(rng, (3, 4), low, high)
        w = _weights(rng, (3, 4))
        return (lambda: (fn(x) * T.Tensor(w)).sum()), [x]
    return build


def _binary(fn, b_low=-1.0, b_high=1.0, scalar_b=False):
    def build(rng):
        a = _t(rng, (3, 4))
        b = _t(rng, () if scalar_b else (3, 4), b_low, b_high)
        w = _weights(rng, (3, 4))
        return (lambda: (fn(a, b) * T.Tensor(w)).sum()), [a, b]
    return build


def _matmul(rng):
    a, b = _t(rng, (3, 4)), _t(rng, (4, 2))
    return (lambda: T.matmul(a, b).sum()), [a, b]


def _batched_matmul(rng):
    a, b = _t(rng, (2, 3, 4)), _t(rng, (2, 4, 3))
    w = _weights(rng, (2, 3, 3))
    return (lambda: (T.matmul(a, b) * T.Tensor(w)).sum()), [a, b]


def _reduce(kind, axis):
    def build(rng):
        x = _distinct(rng, (3, 4, 2)) if kind == "max" else _t(rng, (3, 4, 2))
        probe_rng = SplitMix64(rng.next_u64())
        return (lambda: _probe(T.reduce(kind, x, axis), SplitMix64(probe_rng.state))), [x]
    return build


def _softmax(rng):
    x = _t(rng, (3, 5), -2, 2)
    w = _weights(rng, (3, 5))
    return (lambda: (T.softmax(x, axis=-1) * T.Tensor(w)).sum()), [x]


def _layernorm(rng):
    x = _t(rng, (3, 6), -2, 2)
    g = _t(rng, (6,), 0.5, 1.5)
    b = _t(rng, (6,))
    w = _weights(rng, (3, 6))
    return (lambda: (T.layernorm(x, g, b) * T.Tensor(w)).sum()), [x, g, b]


def _conv(stride, groups):
    def build(rng):
        x = _t(rng, (2, 3, 5, 5))
        k = _t(rng, (3, 1, 3, 3) if groups == 3 else (2, 3, 3, 3))
        bias = _t(rng, (3,) if groups == 3 else (2,))
        probe_rng = SplitMix64(rng.next_u64())
        fn = lambda: _probe(T.conv2d(x, k, bias, stride=stride, padding=1, groups=groups),
                            SplitMix64(probe_rng.state))
        return fn, [x, k, bias]
    return build


def _concat_split(rng):
    a, b = _t(rng, (2, 3)), _t(rng, (1, 3))
    w = _weights(rng, (3, 3))

    def fn():
        joined = T.concat([a, b], axis=0) * T.Tensor(w)
        top, bottom = T.split(joined, [1, 2], axis=0)
        return (top * 2.0).sum() + (bottom * bottom).sum()

    return fn, [a, b]


def _reshape_transpose(rng):
    x = _t(rng, (2, 3, 4))
    w = _weights(rng, (4, 6))
    return (lambda: (T.reshape(T.transpose(x, (2, 0, 1)), (4, 6)) * T.Tensor(w)).sum()), [x]


def _broadcast(rng):
    b = _t(rng, (4,))
    w = _weights(rng, (3, 4))
    return (lambda: (T.broadcast_to(b, (3, 4)) * T.Tensor(w)).sum()), [b]


def _resize(rng):
    x = _t(rng, (1, 2, 3, 3))
    probe_rng = SplitMix64(rng.next_u64())
    return (lambda: _probe(T.resize_bilinear(x, (6, 7)), SplitMix64(probe_rng.state))), [x]


def _step_case(rng):
    m = _t(rng, (4, 4), 0.0, 1.0)
    t = _t(rng, (), 0.2, 0.8)
    w = _weights(rng, (4, 4))
    return (lambda: (step(m, t, 50.0) * T.Tensor(w)).sum()), [m, t]


def _thresholds(rng):
    p = ThresholdParams(_t(rng, ()), _t(rng, (4,)), _t(rng, (4,)), _t(rng, ()))
    t_out = _t(rng, (3, 4))
    w = _weights(rng, (3,))
    return (lambda: dataset_threshold(p) * 0.7 + (image_threshold(p, t_out) * T.Tensor(w)).sum()), \
        [p.t_d, p.proj_w, p.proj_b, t_out]


def _scel(rng):
    m = _t(rng, (6, 6), 0.05, 0.95)
    gt = (rng.uniform_array(36) < 0.3).reshape(6, 6).astype(np.float64)
    return (lambda: scel(m, gt)), [m]


def _dice(rng):
    x = _t(rng, (6, 6), 0.05, 0.95)
    gt = (rng.uniform_array(36) < 0.3).reshape(6, 6).astype(np.float64)
    gt[0, 0] = 1.0
    return (lambda: dice(x, gt)), [x]


def _ath(rng):
    m = _t(rng, (8, 8), 0.05, 0.95)
    gt = (rng.uniform_array(64) < 0.3).reshape(8, 8).astype(np.float64)
    gt[0, 0] = 1.0
    p = ThresholdParams(_t(rng, (), -0.5, 0.5), _t(rng, (4,)), _t(rng, (4,), -0.2, 0.2), _t(rng, (), -0.2, 0.2))
    t_out = _t(rng, (1, 4))

    def fn():
        t_I = image_threshold(p, t_out)
        return ath_loss(m, gt, dataset_threshold(p), T.reshape(t_I, ()), LossWeights(0.5, 0.5), 50.0)

    return fn, [m, p.t_d, p.proj_w, p.proj_b, t_out]


_GE_CFG = GEConfig(channels=8, heads=2, repeats=1, ffn_ratio=2, h=2, w=2)


def _ge_params(rng):
    params = init_ge_params(_GE_CFG, rng)
    return params, layer_params(params, 0)


def _mhsa(rng):
    _, p = _ge_params(rng)
    x = _t(rng, (2, 5, 8))
    probe_rng = SplitMix64(rng.next_u64())
    return (lambda: _probe(mhsa(x, p, _GE_CFG), SplitMix64(probe_rng.state))), [x, p["qkv_w"], p["lepe_w"]]


def _ffn(rng):
    _, p = _ge_params(rng)
    # redraw until no hidden pre-activation sits within FD reach of the relu kink
    while True:
        x = _t(rng, (1, 3, 8))
        pre = T.matmul(x, p["ffn1_w"]).data + p["ffn1_b"].data
        if np.abs(pre).min() > 0.01:
            break
    probe_rng = SplitMix64(rng.next_u64())
    return (lambda: _probe(ffn(x, p), SplitMix64(probe_rng.state))), [x, p["ffn1_w"], p["ffn2_w"]]


def _ge(rng):
    cfg = GEConfig(channels=16, heads=4, repeats=2, ffn_ratio=2, h=4, w=4)
    params = init_ge_params(cfg, rng)
    c5 = _t(rng, (1, 16, 4, 4))
    t_in = _t(rng, (16,))
    return (lambda: ge_forward(c5, t_in, params, cfg)[1].sum()), [t_in]


CASES = [
    Case("add", _binary(T.add), PRIMITIVE_TOL),
    Case("sub", _binary(T.sub), PRIMITIVE_TOL),
    Case("mul", _binary(T.mul), PRIMITIVE_TOL),
    Case("div", _binary(T.div, 0.5, 2.0), PRIMITIVE_TOL),
    Case("mul_scalar", _binary(T.mul, scalar_b=True), PRIMITIVE_TOL),
    Case("div_scalar", _binary(T.div, 0.5, 2.0, scalar_b=True), PRIMITIVE_TOL),
    Case("neg", _unary(T.neg), PRIMITIVE_TOL),
    Case("exp", _unary(T.exp), PRIMITIVE_TOL),
    Case("log", _unary(T.log, 0.2, 2.0), PRIMITIVE_TOL),
    Case("sigmoid", _unary(T.sigmoid, -3, 3), PRIMITIVE_TOL),
    Case("relu", lambda rng: ((lambda x, w: (lambda: (T.relu(x) * T.Tensor(w)).sum(), [x]))(
        _away_from_zero(rng, (3, 4)), _weights(rng, (3, 4)))), PRIMITIVE_TOL),
    Case("matmul", _matmul, PRIMITIVE_TOL),
    Case("matmul_batched", _batched_matmul, PRIMITIVE_TOL),
    Case("sum", _reduce("sum", (0, 2)), PRIMITIVE_TOL),
    Case("mean", _reduce("mean", 1), PRIMITIVE_TOL),
    Case("max", _reduce("max", 1), PRIMITIVE_TOL),
    Case("softmax", _softmax, PRIMITIVE_TOL),
    Case("layernorm", _layernorm, PRIMITIVE_TOL),
    Case("concat_split", _concat_split, PRIMITIVE_TOL),
    Case("reshape_transpose", _reshape_transpose, PRIMITIVE_TOL),
    Case("broadcast_to", _broadcast, PRIMITIVE_TOL),
    Case("resize_bilinear", _resize, PRIMITIVE_TOL),
    Case("conv2d", _conv(1, 1), COMPOSITE_TOL),
    Case("conv2d_stride2", _conv(2, 1), COMPOSITE_TOL),
    Case("conv2d_depthwise", _conv(1, 3), COMPOSITE_TOL),
    Case("step", _step_case, COMPOSITE_TOL),
    Case("thresholds", _thresholds, COMPOSITE_TOL),
    Case("scel", _scel, COMPOSITE_TOL),
    Case("dice", _dice, COMPOSITE_TOL),
    Case("ath_loss", _ath, COMPOSITE_TOL),
    Case("mhsa", _mhsa, COMPOSITE_TOL),
    Case("ffn", _ffn, COMPOSITE_TOL),
    Case("ge_forward", _ge, COMPOSITE_TOL),
]

HEAVY: dict[str, int] = {}


@dataclass
class CaseResult:
    name: str
    trials: int
    max_rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tol


def run_case(case: Case, trials: int, seed: int = 0) -> CaseResult:
    worst = 0.0
    for i in range(trials):
        fn, inputs = case.build(SplitMix64(seed).fork(f"{case.name}/{i}"))
        worst = max(worst, T.gradcheck(fn, inputs, FD_STEP))
    return CaseResult(case.name, trials, worst, case.tol)


def run_suite(trials: int = 100, seed: int = 0, names=None) -> list[CaseResult]:
    results = []
    for case in CASES:
        if names and case.name not in names:
            continue
        n = min(trials, HEAVY.get(case.name, trials))
        results.append(run_case(case, n, seed))
    return results


def format_table(results: list[CaseResult], elapsed: float | None = None) -> str:
    lines = [f"{'op':<20} {'trials':>6} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.trials:>6} {r.max_rel_error:>12.3e} {r.tol:>8.0e}  {'ok' if r.ok else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f}s")
    return "\n".join(lines)


def main_table(trials: int = 100, seed: int = 0) -> tuple[bool, str]:
    start = time.perf_counter()
    results = run_suite(trials, seed)
    return all(r.ok for r in results), format_table(results, time.perf_counter() - start)
