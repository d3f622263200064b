"""Tape-based reverse-mode automatic differentiation over dense float32 arrays.

Every operation records its inputs and a vector-Jacobian closure on the
produced tensor; ``backward`` walks the resulting graph once in reverse
topological order. The graph lives only as long as the output tensors, so a
training step that drops its loss tensor also drops the tape.

Conventions:
  * data is always float32; reductions accumulate in float64 and cast back
  * ``backward`` accumulates into ``.grad`` (repeated calls add up)
  * broadcasting follows numpy; gradients are summed back to input shapes
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float32

# Grad mode is thread-local: render workers evaluating under no_grad must
# not switch off recording for a training thread.
_tls = threading.local()
# When set, every op output is checked for NaN/Inf. Slow; meant for debugging.
nan_debug = False


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation)."""
    prev = grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != DTYPE:
        arr = arr.astype(DTYPE)
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` back down to ``shape`` (inverse of broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g, dtype=DTYPE)


class Tensor:
    """A dense float32 array plus an optional gradient and tape node."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method forms --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjps: Sequence[Callable]) -> Tensor:
    """Create a result tensor, recording the tape entry if grad is active."""
    if nan_debug and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by an operation")
    need = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need)
    if need:
        keep, vj = [], []
        for p, v in zip(parents, vjps):
            if p.requires_grad:
                keep.append(p)
                vj.append(v)
        out._parents = tuple(keep)
        out._vjps = tuple(vj)
    return out


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _node(out, (a, b), (
        lambda g: _unbroadcast(g, a.data.shape),
        lambda g: _unbroadcast(g, b.data.shape),
    ))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _node(out, (a, b), (
        lambda g: _unbroadcast(g, a.data.shape),
        lambda g: _unbroadcast(-g, b.data.shape),
    ))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _node(out, (a, b), (
        lambda g: _unbroadcast(g * b.data, a.data.shape),
        lambda g: _unbroadcast(g * a.data, b.data.shape),
    ))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b), (
        lambda g: _unbroadcast(g / b.data, a.data.shape),
        lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
    ))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), (lambda g: -g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data ** DTYPE(p)
    return _node(out, (a,), (lambda g: g * p * a.data ** DTYPE(p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return _node(out, (a,), (lambda g: g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), (lambda g: g * DTYPE(0.5) / out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)
    return _node(out, (a,), (lambda g: g * np.sign(a.data),))


def clip(a, lo: float | None, hi: float | None) -> Tensor:
    """Clamp to [lo, hi]; gradient passes wherever the value was not cut off."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask *= a.data >= lo
    if hi is not None:
        mask *= a.data <= hi
    return _node(out, (a,), (lambda g: g * mask,))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.maximum(a.data, b.data)
    take_a = a.data >= b.data
    return _node(out, (a, b), (
        lambda g: _unbroadcast(g * take_a, a.data.shape),
        lambda g: _unbroadcast(g * ~take_a, b.data.shape),
    ))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.minimum(a.data, b.data)
    take_a = a.data <= b.data
    return _node(out, (a, b), (
        lambda g: _unbroadcast(g * take_a, a.data.shape),
        lambda g: _unbroadcast(g * ~take_a, b.data.shape),
    ))


# -- activations ----------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _node(out, (a,), (lambda g: g * (a.data > 0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _node(out, (a,), (lambda g: g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), (lambda g: g * (1.0 - out * out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot)).astype(DTYPE)

    return _node(out, (a,), (vjp,))


# -- reductions -----------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(DTYPE)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).astype(DTYPE)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).astype(DTYPE)

    return _node(out, (a,), (vjp,))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(DTYPE)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, a.data.shape).astype(DTYPE)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape) / count).astype(DTYPE)

    return _node(out, (a,), (vjp,))


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient flows to the first maximal element."""
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        grad = np.zeros_like(a.data)
        if axis is None:
            idx = np.unravel_index(np.argmax(a.data), a.data.shape)
            grad[idx] = g
            return grad
        arg = np.argmax(a.data, axis=axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, np.expand_dims(arg, axis), gg, axis=axis)
        return grad

    return _node(np.asarray(out, dtype=DTYPE), (a,), (vjp,))


def cumsum(a, axis: int) -> Tensor:
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis, dtype=np.float64).astype(DTYPE)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis, dtype=np.float64), axis).astype(DTYPE)

    return _node(out, (a,), (vjp,))


# -- shape manipulation -----------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _node(out, (a,), (lambda g: g.reshape(a.data.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), (lambda g: np.ascontiguousarray(np.transpose(g, inv)),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: np.ascontiguousarray(g[sl])

    return _node(out, tuple(ts), tuple(make_vjp(i) for i in range(len(ts))))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return grad

    return _node(np.ascontiguousarray(out), (a,), (vjp,))


# -- linear algebra -----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _node(out, (a, b), (
        lambda g: g @ b.data.T,
        lambda g: a.data.T @ g,
    ))


def matmul64(a, b) -> Tensor:
    """Matrix product accumulated in float64, cast back to float32.

    Used for second-moment statistics (Gram matrices) where float32
    accumulation over many pixels loses too much precision.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(DTYPE)
    return _node(out, (a, b), (
        lambda g: (g.astype(np.float64) @ b.data.T.astype(np.float64)).astype(DTYPE),
        lambda g: (a.data.T.astype(np.float64) @ g.astype(np.float64)).astype(DTYPE),
    ))


# -- gather / scatter -----------------------------------------------------------------


def take_rows(table, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table: out[..., :] = table[idx[...], :].

    The backward pass scatter-adds with bincount per feature column, which is
    much faster than ``np.add.at`` for the highly colliding index sets hash
    encodings produce.
    """
    table = as_tensor(table)
    if table.data.ndim != 2:
        raise DimensionError("take_rows expects a 2-D table")
    idx = np.asarray(idx)
    flat = idx.reshape(-1)
    out = table.data[flat].reshape(idx.shape + (table.data.shape[1],))
    nrows = table.data.shape[0]

    def vjp(g):
        gf = g.reshape(-1, table.data.shape[1])
        grad = np.empty_like(table.data)
        for c in range(table.data.shape[1]):
            grad[:, c] = np.bincount(flat, weights=gf[:, c], minlength=nrows)
        return grad

    return _node(out, (table,), (vjp,))


def weighted_row_sum(table, idx: np.ndarray, w: np.ndarray) -> Tensor:
    """Fused gather-and-blend: out[n, l, :] = sum_k w[n, l, k] * table[idx[n, l, k], :].

    The workhorse of trilinear hash encoding; one tape node instead of a
    gather/multiply/reduce chain, with a bincount-based scatter in backward.
    Two-feature tables gather through a complex64 view, which runs one fancy
    index instead of a strided row copy.
    """
    table = as_tensor(table)
    idx = np.asarray(idx)
    w = np.asarray(w, dtype=DTYPE)
    nfeat = table.data.shape[1]
    flat = idx.reshape(-1)
    if nfeat == 2 and table.data.flags.c_contiguous:
        packed = table.data.view(np.complex64).reshape(-1)
        gathered = np.take(packed, flat).view(DTYPE).reshape(idx.shape + (2,))
    else:
        gathered = table.data[flat].reshape(idx.shape + (nfeat,))
    out = np.einsum("...kf,...k->...f", gathered, w)
    nrows = table.data.shape[0]

    def vjp(g):
        contrib = np.einsum("...f,...k->...kf", g, w).reshape(-1, nfeat)
        grad = np.empty_like(table.data)
        for c in range(nfeat):
            grad[:, c] = np.bincount(flat, weights=contrib[:, c], minlength=nrows)
        return grad

    return _node(np.ascontiguousarray(out), (table,), (vjp,))


def take_flat(a, idx: np.ndarray) -> Tensor:
    """Gather arbitrary elements of the flattened input: out = a.ravel()[idx]."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = a.data.reshape(-1)[idx]

    def vjp(g):
        grad = np.zeros(a.data.size, dtype=DTYPE)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1))
        return grad.reshape(a.data.shape)

    return _node(out, (a,), (vjp,))


def scatter(values, index, shape) -> Tensor:
    """Place ``values`` into a zero tensor of ``shape`` at ``index``.

    ``index`` is a tuple of integer arrays addressing distinct positions
    (duplicates would silently keep only one write, so callers must not
    produce them).
    """
    values = as_tensor(values)
    out = np.zeros(shape, dtype=DTYPE)
    out[index] = values.data
    return _node(out, (values,), (lambda g: np.ascontiguousarray(g[index]),))


# -- graph walk -----------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    ``loss`` must be scalar. Calling backward repeatedly without clearing
    grads accumulates, matching the optimizer contract.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is non-finite; refusing to backpropagate")
    if not loss.requires_grad:
        return

    # Iterative topological order (DFS) over the recorded graph.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    messages: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = messages.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            prev = messages.get(id(parent))
            messages[id(parent)] = contrib if prev is None else prev + contrib
