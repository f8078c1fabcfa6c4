"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Covers exactly the primitives the flow and density models need: broadcasting
arithmetic, matmul, reductions, logsumexp, masked softmax, shape surgery,
scaled-dot-product attention, and a finite-difference gradient oracle.
Training runs in float32; verification math runs in float64 by constructing
the models with ``dtype=np.float64``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "square",
    "tanh",
    "gelu",
    "clip",
    "maximum",
    "tsum",
    "tmean",
    "logsumexp",
    "softmax",
    "reshape",
    "transpose",
    "flip",
    "concat",
    "take",
    "attention",
    "finite_diff_check",
]

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense array plus the bookkeeping needed for one reverse sweep.

    The recorded graph is implicit: every non-leaf tensor keeps references to
    its parents and a closure that pushes its output gradient into them.
    Topological recording order is a valid reverse-sweep order by
    construction, and each leaf accumulates exactly one gradient per
    ``backward`` call.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # accumulation always rebinds (never mutates in place), so storing the
    # incoming array without copying is safe even when ops share it
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast during the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    ``loss`` must be a scalar (size-1) node produced by recorded primitives.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy's stacked-batch semantics on leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects tensors of rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(a.data @ b.data, (a, b), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        _accumulate(a, g * (0.5 / out_data))

    return _make(out_data, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out_data = 0.5 * x * (1.0 + t)

    def bw(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 0.134145 * x2)
        _accumulate(a, g * d)

    return _make(out_data, (a,), bw)


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    """Clamp with the usual subgradient: identity inside, zero outside."""
    out_data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def bw(g):
        _accumulate(a, g * inside)

    return _make(out_data, (a,), bw)


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient flows where a wins."""
    wins = a.data >= floor

    def bw(g):
        _accumulate(a, g * wins)

    return _make(np.maximum(a.data, floor), (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        _accumulate(a, _expand_reduced(g, a.data.shape, axis, keepdims))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]

    def bw(g):
        _accumulate(a, _expand_reduced(g, a.data.shape, axis, keepdims) / count)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted log-sum-exp along one axis; never overflows on finite input."""
    if a.data.shape[axis if axis >= 0 else a.data.ndim + axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(total), axis=axis)
    weights = shifted / total

    def bw(g):
        _accumulate(a, np.expand_dims(g, axis) * weights)

    return _make(out_data, (a,), bw)


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax; masked-out entries get exactly zero weight.

    ``mask`` is a boolean array broadcastable to ``a`` with True marking the
    allowed entries. Gradients of masked entries are exactly zero, so causal
    masking makes earlier positions bit-insensitive to later inputs.
    """
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    shifted = np.exp(x - m)
    p = shifted / shifted.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(a, p * (g - inner))

    return _make(p, (a,), bw)


# ---------------------------------------------------------------------------
# shape surgery


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape

    def bw(g):
        _accumulate(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def flip(a: Tensor, axis: int) -> Tensor:
    def bw(g):
        _accumulate(a, np.flip(g, axis=axis))

    return _make(np.flip(a.data, axis=axis).copy(), (a,), bw)


def _getitem(a: Tensor, index) -> Tensor:
    out_data = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accumulate(a, full)

    return _make(out_data, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def take(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]`` with scatter-add backward (embedding tables)."""
    idx = np.asarray(idx)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    return _make(table.data[idx], (table,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Fused normalization over the last axis: (x - mean) / std * gamma + beta."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = xhat * gamma.data + beta.data

    def bw(g):
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, g.shape[-1]).sum(axis=0))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std)

    return _make(out_data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# attention


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = True) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    Output row i is a convex combination of value rows at positions <= i in
    causal mode, or of all rows in bidirectional mode. Masked positions carry
    exactly zero weight, so causal outputs are bit-insensitive to later
    inputs.
    """
    if q.data.shape[-2] != k.data.shape[-2] or k.data.shape != v.data.shape:
        raise ValueError(
            f"attention shape mismatch: q{q.data.shape} k{k.data.shape} v{v.data.shape}"
        )
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ValueError("attention requires matching query/key dims")
    dh = q.data.shape[-1]
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), Tensor(np.asarray(1.0 / np.sqrt(dh), dtype=q.dtype)))
    mask = None
    if causal:
        n = q.data.shape[-2]
        mask = np.tril(np.ones((n, n), dtype=bool))
    weights = softmax(scores, axis=-1, mask=mask)
    return matmul(weights, v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    eps: float = 1e-5,
    floor: float = 1e-12,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must be deterministic. Error
    per coordinate is |analytic - numeric| / (|analytic| + |numeric| + floor).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.asarray(x)
    leaf = Tensor(x0.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0, dtype=x0.dtype)
    flat = numeric.reshape(-1)
    base = x0.copy().reshape(-1)
    with no_grad():
        for i in range(base.size):
            orig = base[i]
            probe = base.copy()
            probe[i] = orig + eps
            hi = float(f(Tensor(probe.reshape(x0.shape))).data)
            probe[i] = orig - eps
            lo = float(f(Tensor(probe.reshape(x0.shape))).data)
            flat[i] = (hi - lo) / (2.0 * eps)

    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + floor)
    return float(rel.max())
