"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every network activation and parameter is a :class:`Tensor`.  Operations
build a graph of closures; :func:`backward` walks it in reverse topological
order.  Leaf tensors with ``requires_grad`` accumulate into ``.grad`` across
calls until :meth:`Tensor.zero_grad` is called.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels

PROB_EPS = 1e-12

TRAIN = "train"
EVAL = "eval"


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class BatchSizeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        # leaves own a grad buffer from birth so disconnected params read as zero
        self.grad = np.zeros_like(arr) if (requires_grad and not _parents) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    out = kernels.relu_forward(x.data)
    return _make(out, (x,), lambda g: (kernels.relu_backward(g, out),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def gradient_reversal(x: Tensor, scale: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-scale``."""
    if not scale > 0:
        raise ValueError(f"gradient reversal scale must be > 0, got {scale}")
    s = float(scale)
    # forward value is the same buffer, so it is bit-exact by construction
    return _make(x.data, (x,), lambda g: (-s * g,))


# ---------------------------------------------------------------- reductions / shape

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def pick(a: Tensor, cols) -> Tensor:
    """Row-wise gather ``a[i, cols[i]]`` -> shape (B,)."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return _make(a.data[rows, cols], (a,), bw)


# ---------------------------------------------------------------- layers

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` for x of shape (B, I), W (I, O), b (O,)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    need_x, need_W = x.requires_grad, W.requires_grad

    def bw(g):
        gx = g @ Wd.T if need_x else None
        gW = xd.T @ g if need_W else None
        return gx, gW, g.sum(axis=0)

    if b is None:
        return _make(out, (x, W), lambda g: bw(g)[:2])
    out += b.data
    return _make(out, (x, W, b), bw)


def softmax(logits: Tensor) -> Tensor:
    z = logits.data
    if z.ndim != 2 or z.shape[1] < 2:
        raise DimensionError(f"softmax expects (B, K>=2), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("softmax received non-finite logits")
    p = kernels.softmax_rows(z)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), bw)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log probs[i, labels[i]]`` with probabilities clamped."""
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    B, K = probs.shape
    if labels.shape[0] != B:
        raise DimensionError(f"cross_entropy: {B} rows but {labels.shape[0]} labels")
    if labels.size and (labels.max() >= K or labels.min() < 0):
        raise IndexError(f"cross_entropy: label out of range for {K} classes")
    p = clamp(pick(probs, labels), PROB_EPS, 1.0 - PROB_EPS)
    return scale(tsum(log(p)), -1.0 / B)


def binary_cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean of ``-t log p - (1 - t) log(1 - p)``."""
    t = np.asarray(targets, dtype=np.float64).reshape(probs.shape)
    p = clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    terms = add(mul(log(p), t), mul(log(add(1.0, neg(p))), 1.0 - t))
    return scale(tsum(terms), -1.0 / t.size)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)

    def __post_init__(self):
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        if self.running_mean.shape != self.running_var.shape:
            raise DimensionError("running mean/var lengths differ")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(),
                              self.momentum, self.eps)


def batch_norm(x: Tensor, state: BatchNormState, mode: str = TRAIN,
               gamma: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    """Per-channel normalisation of a (B, C) tensor.

    Train mode normalises with the batch moments and folds them into the
    running averages; eval mode uses the running averages only.
    """
    if x.data.ndim != 2 or x.shape[1] != state.running_mean.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} vs {state.running_mean.shape[0]} channels")
    xd = x.data
    if mode == TRAIN:
        B = xd.shape[0]
        if B < 2:
            raise BatchSizeError(f"batch_norm in train mode needs B >= 2, got {B}")
        xhat, mu, var, inv_std = kernels.bn_forward(xd, state.eps)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * (B / (B - 1))

        def bw(g):
            return (kernels.bn_backward(g, xhat, inv_std),)
    elif mode == EVAL:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean) * inv_std

        def bw(g):
            return (g * inv_std,)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    out = _make(xhat, (x,), bw)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
