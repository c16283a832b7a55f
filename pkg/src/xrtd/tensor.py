"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays wrapped in a `Tensor` that
records a dynamic tape of closures. Broadcasting is supported for scalar and
trailing-dimension cases (numpy semantics with gradient un-broadcasting).
Training runs in float32; gradient checking switches the default element type
to float64 via `using_dtype`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradError(RuntimeError):
    """Raised on autograd contract violations (e.g. backward on non-scalar)."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported element type {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default element type (float32/float64)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense array participating in a dynamically built gradient tape.

    Only tensors created with `requires_grad=True` (and results derived from
    them) receive gradients; plain constants never allocate grad buffers.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward_fn: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype.type not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        self.grad = g if self.grad is None else self.grad + g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data + other.data, parents=(self, other))

        def bw(g):
            self._accumulate(g)
            other._accumulate(g)
        out._backward_fn = bw if out.requires_grad else None
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, parents=(self,))

        def bw(g):
            self._accumulate(-g)
        out._backward_fn = bw if out.requires_grad else None
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data * other.data, parents=(self, other))

        def bw(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)
        out._backward_fn = bw if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data / other.data, parents=(self, other))

        def bw(g):
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / (other.data * other.data))
        out._backward_fn = bw if out.requires_grad else None
        return out

    def __pow__(self, exponent: float) -> "Tensor":
        p = float(exponent)
        out = Tensor(self.data ** p, parents=(self,))

        def bw(g):
            self._accumulate(g * p * self.data ** (p - 1.0))
        out._backward_fn = bw if out.requires_grad else None
        return out

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, shape) -> "Tensor":
        out = Tensor(self.data.reshape(shape), parents=(self,))

        def bw(g):
            self._accumulate(g.reshape(self.data.shape))
        out._backward_fn = bw if out.requires_grad else None
        return out

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out = Tensor(self.data.transpose(axes), parents=(self,))

        def bw(g):
            self._accumulate(g.transpose(inverse))
        out._backward_fn = bw if out.requires_grad else None
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))
        out._backward_fn = bw if out.requires_grad else None
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities ------------------------------------------

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        out = Tensor(y, parents=(self,))

        def bw(g):
            self._accumulate(g * y)
        out._backward_fn = bw if out.requires_grad else None
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), parents=(self,))

        def bw(g):
            self._accumulate(g / self.data)
        out._backward_fn = bw if out.requires_grad else None
        return out

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = Tensor(y, parents=(self,))

        def bw(g):
            self._accumulate(g * (1.0 - y * y))
        out._backward_fn = bw if out.requires_grad else None
        return out

    def sigmoid(self) -> "Tensor":
        y = _sigmoid(self.data)
        out = Tensor(y, parents=(self,))

        def bw(g):
            self._accumulate(g * y * (1.0 - y))
        out._backward_fn = bw if out.requires_grad else None
        return out

    def relu(self) -> "Tensor":
        mask = self.data > 0
        out = Tensor(self.data * mask, parents=(self,))

        def bw(g):
            self._accumulate(g * mask)
        out._backward_fn = bw if out.requires_grad else None
        return out

    def gelu(self) -> "Tensor":
        """Tanh-form GELU approximation."""
        c = math.sqrt(2.0 / math.pi)
        x = self.data
        x_sq = x * x
        inner = c * (x + 0.044715 * x_sq * x)
        t = np.tanh(inner)
        out = Tensor(0.5 * x * (1.0 + t), parents=(self,))

        def bw(g):
            d_inner = c * (1.0 + 3 * 0.044715 * x_sq)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            self._accumulate(g * local)
        out._backward_fn = bw if out.requires_grad else None
        return out

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        backward(self)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def matmul(a: Tensor, b) -> Tensor:
    """Matrix product with optional leading batch dimensions."""
    b = _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul requires >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data), parents=(a, b))

    def bw(g):
        a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))
    out._backward_fn = bw if out.requires_grad else None
    return out


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])
    out._backward_fn = bw if out.requires_grad else None
    return out


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `weight[ids]`; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise IndexError(
            f"id out of range for table of {weight.data.shape[0]} rows")
    out = Tensor(weight.data[ids], parents=(weight,))

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        weight._accumulate(gw)
    out._backward_fn = bw if out.requires_grad else None
    return out


def gather_rows(x: Tensor, index0: np.ndarray, index1: np.ndarray) -> Tensor:
    """Select rows x[index0[t], index1[t]] from a stacked [B, n, ...] tensor."""
    index0 = np.asarray(index0)
    index1 = np.asarray(index1)
    out = Tensor(x.data[index0, index1], parents=(x,))

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (index0, index1), g)
        x._accumulate(gx)
    out._backward_fn = bw if out.requires_grad else None
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, parents=(x,))

    def bw(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))
    out._backward_fn = bw if out.requires_grad else None
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv
    out = Tensor(x_hat * gain.data + bias.data, parents=(x, gain, bias))
    reduce_axes = tuple(range(x.data.ndim - 1))

    def bw(g):
        gain._accumulate((g * x_hat).sum(axis=reduce_axes))
        bias._accumulate(g.sum(axis=reduce_axes))
        gh = g * gain.data
        x._accumulate(inv * (gh - gh.mean(axis=-1, keepdims=True)
                             - x_hat * (gh * x_hat).mean(axis=-1, keepdims=True)))
    out._backward_fn = bw if out.requires_grad else None
    return out


def softmax_cross_entropy(logits: Tensor, targets, mask=None,
                          reduction: str = "sum") -> Tensor:
    """Negative log-softmax at target ids, reduced over (masked) rows.

    `logits` is [n, V]; `mask` optionally restricts the loss to a subset of
    row positions. An empty mask yields a zero loss with zero gradient.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(logits.data.shape[0]) if mask is None \
        else np.asarray(sorted(mask), dtype=np.int64)
    if rows.size == 0:
        return Tensor(np.asarray(0.0, dtype=logits.data.dtype))
    picked = logits.data[rows]
    tgt = targets[rows] if mask is not None else targets
    if tgt.size and (tgt.min() < 0 or tgt.max() >= picked.shape[1]):
        raise IndexError("target id out of vocabulary range")
    mx = picked.max(axis=1, keepdims=True)
    lse = np.log(np.exp(picked - mx).sum(axis=1)) + mx[:, 0]
    losses = lse - picked[np.arange(rows.size), tgt]
    scale = 1.0 if reduction == "sum" else 1.0 / rows.size
    out = Tensor(np.asarray(losses.sum() * scale, dtype=logits.data.dtype),
                 parents=(logits,))

    def bw(g):
        probs = np.exp(picked - lse[:, None])
        probs[np.arange(rows.size), tgt] -= 1.0
        gl = np.zeros_like(logits.data)
        gl[rows] = probs * (float(g) * scale)
        logits._accumulate(gl)
    out._backward_fn = bw if out.requires_grad else None
    return out


def binary_cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Sum of per-position sigmoid cross-entropy, numerically stable."""
    z = np.asarray(labels, dtype=logits.data.dtype)
    if z.shape != logits.data.shape:
        raise DimensionError(
            f"labels shape {z.shape} != logits shape {logits.data.shape}")
    x = logits.data
    losses = np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.asarray(losses.sum(), dtype=x.dtype), parents=(logits,))

    def bw(g):
        logits._accumulate(float(g) * (_sigmoid(x) - z))
    out._backward_fn = bw if out.requires_grad else None
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of `loss` w.r.t. every contributing trainable tensor."""
    if loss.data.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
