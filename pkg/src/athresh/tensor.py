"""Dense float64 tensors with tape-ordered reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a backward closure on the result. Results are stamped with a
monotonically increasing sequence number at creation, so sorting the
reachable graph by that number recovers the execution tape; ``backward``
walks it in reverse, visiting each operation once.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes or a size-1 operand. Anything else goes through ``broadcast_to``,
which keeps gradient routing explicit.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYERNORM_EPS = 1e-5

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.op = "leaf"

    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _fail_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# --------------------------------------------------------------------------
# tape + backward


def tape(root: Tensor) -> list[Tensor]:
    """Operations reachable from ``root`` in execution order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._seq)
    return nodes


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() on a tensor that does not require grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._grad is None:
            node._grad = g.copy() if node._backward is None else g
        else:
            node._grad = node._grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# --------------------------------------------------------------------------
# elementwise


def _binary_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.size == 1 or b.size == 1:
        return np.broadcast_shapes(a.shape, b.shape)
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape} (only equal shapes or scalar broadcasting)")


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def bw(g):
        return _fit(g / b.data, a.shape), _fit(-g * out / b.data, b.shape)

    return _result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min():.6g})")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


@contextmanager
def trace_relu():
    """Collect the activation pattern of every relu evaluated inside the block."""
    prev = getattr(_state, "relu_trace", None)
    _state.relu_trace = trace = []
    try:
        yield trace
    finally:
        _state.relu_trace = prev


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    trace = getattr(_state, "relu_trace", None)
    if trace is not None:
        trace.append(mask)
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp(a, low: float, high: float) -> Tensor:
    """Clip to [low, high]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clamp")


# --------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; the gradient is scattered back."""
    if not isinstance(index, tuple):
        index = (index,)
    if not all(isinstance(i, (slice, int, np.integer)) for i in index):
        raise ShapeError("only basic slicing is supported")
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(np.array(out), (a,), bw, "take")


def broadcast_to(a, shape) -> Tensor:
    """Numpy-style expansion; the backward pass sums the expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc

    def bw(g):
        lead = g.ndim - a.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _result(out, (a,), bw, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree off-axis")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax] or any(s < 0 for s in sizes):
        raise ShapeError(f"split sizes {list(sizes)} do not sum to axis length {a.shape[ax]}")
    outs = []
    start = 0
    for s in sizes:
        index = [slice(None)] * a.ndim
        index[ax] = slice(start, start + s)
        index = tuple(index)

        def bw(g, index=index):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)

        outs.append(_result(a.data[index], (a,), bw, "split"))
        start += s
    return outs


# --------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
    return tuple(sorted(ax % ndim for ax in axes))


def reduce(kind: str, a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def expand(g):
        return np.expand_dims(g, axes) if not keepdims and axes else g

    if kind == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)
        return _result(out, (a,), lambda g: (np.broadcast_to(expand(g), a.shape).copy(),), "sum")
    if kind == "mean":
        out = a.data.mean(axis=axes, keepdims=keepdims)
        return _result(out, (a,), lambda g: (np.broadcast_to(expand(g) / count, a.shape).copy(),), "mean")
    if kind == "max":
        full = a.data.max(axis=axes, keepdims=True)
        hit = a.data == full
        share = hit / hit.sum(axis=axes, keepdims=True)
        out = full if keepdims else full.squeeze(axis=axes) if axes else full.reshape(())
        return _result(out, (a,), lambda g: (expand(g) * share,), "max")
    raise ValueError(f"unknown reduction {kind!r}")


# --------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a, b) -> Tensor:
    """(..., n, k) @ (k, m) or batched with equal leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def layernorm(a, gain=None, bias=None, axis: int = -1, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize along ``axis``; ``gain``/``bias`` have shape (a.shape[axis],)."""
    a = as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    if n < 2:
        raise DegenerateInputError(f"layernorm over an axis of length {n}")
    shape = [1] * a.ndim
    shape[ax] = n
    g_data = np.ones(n) if gain is None else as_tensor(gain).data
    mu = a.data.mean(axis=ax, keepdims=True)
    centered = a.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=ax, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * g_data.reshape(shape)
    if bias is not None:
        out = out + as_tensor(bias).data.reshape(shape)
    others = tuple(i for i in range(a.ndim) if i != ax)

    def bw(g):
        dxhat = g * g_data.reshape(shape)
        dx = inv * (
            dxhat - dxhat.mean(axis=ax, keepdims=True) - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True)
        )
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=others))
        if bias is not None:
            grads.append(g.sum(axis=others))
        return tuple(grads)

    parents = [a] + [as_tensor(p) for p in (gain, bias) if p is not None]
    return _result(out, parents, bw, "layernorm")


# --------------------------------------------------------------------------
# convolution and resampling


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation over B x C x H x W.

    ``groups`` is 1 (dense, kernel C' x C x k x k) or C (depthwise, kernel
    C x 1 x k x k).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if groups == 1:
        if Ck != C:
            raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {Ck}")
    elif groups == C:
        if Ck != 1 or O != C:
            raise ShapeError(f"depthwise conv2d needs kernel {C}x1x{k}x{k}, got {kernel.shape}")
    else:
        raise ShapeError(f"groups must be 1 or {C}, got {groups}")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, k={k}, stride={stride}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    w = kernel.data
    if groups == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        out = np.einsum("bchwij,cij->bchw", win, w[:, 0])
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        if groups == 1:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        else:
            gk = np.einsum("bchw,bchwij->cij", g, win)[:, None]
        gxp = np.zeros_like(xp)
        hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
        for i in range(k):
            for j in range(k):
                if groups == 1:
                    contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                else:
                    contrib = g * w[:, 0, i, j].reshape(1, -1, 1, 1)
                gxp[:, :, i : i + hs : stride, j : j + ws : stride] += contrib
        gx = gxp[:, :, padding : padding + H, padding : padding + W]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = [x, kernel] + ([bias] if bias is not None else [])
    return _result(out, parents, bw, "conv2d")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out x n_in) interpolation matrix, align_corners=False.

    Source coordinate of output index i is (i + 0.5) * n_in / n_out - 0.5,
    clamped below at 0; the upper neighbour index is clamped to n_in - 1.
    """
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    R = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(R, (rows, i0), 1.0 - frac)
    np.add.at(R, (rows, i1), frac)
    return R


def resize_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Resize the last two axes of x to ``size``."""
    x = as_tensor(x)
    Rh = bilinear_matrix(x.shape[-2], size[0])
    Rw = bilinear_matrix(x.shape[-1], size[1])
    out = Rh @ x.data @ Rw.T
    return _result(out, (x,), lambda g: (Rh.T @ g @ Rw,), "resize_bilinear")


# --------------------------------------------------------------------------
# finite differences


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``x.data``.

    Coordinates whose +step and -step evaluations see different relu
    activation patterns straddle a kink; they come back as NaN.
    """
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    g = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with trace_relu() as up_pattern:
                up = fn().item()
            flat[i] = orig - step
            with trace_relu() as down_pattern:
                down = fn().item()
            flat[i] = orig
            smooth = all(np.array_equal(u, d) for u, d in zip(up_pattern, down_pattern))
            g[i] = (up - down) / (2 * step) if smooth else np.nan
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| over the largest numeric gradient magnitude; NaN entries skipped."""
    ok = ~np.isnan(numeric)
    if not ok.any():
        return 0.0
    a, n = analytic[ok], numeric[ok]
    scale = max(np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-3) -> float:
    """Relative error between autodiff and central differences.

    The gradient with respect to all ``inputs`` is treated as one vector, so
    a near-zero component (e.g. a threshold whose contributions cancel) is
    judged against the scale of the whole gradient.
    """
    for t in inputs:
        t.zero_grad()
    fn().backward()
    analytic = np.concatenate([t.grad.reshape(-1).copy() for t in inputs])
    numeric = np.concatenate([numerical_grad(fn, t, step).reshape(-1) for t in inputs])
    return relative_error(analytic, numeric)
