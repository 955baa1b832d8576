"""
Dense tensors with define-by-run reverse-mode automatic differentiation.

Every differentiable function in this module takes ``Tensor`` (or array-like)
inputs and returns a new ``Tensor``. When at least one input requires a
gradient, the output remembers its parents and a backward rule, so the
computation graph is rebuilt on every forward pass. ``backward`` collects the
ops reachable from a scalar loss into a :class:`Graph` and visits them in the
exact reverse of their execution order.

Arrays are numpy arrays; float64 is the default dtype and float32 is accepted
for training runs.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateRowError,
    DimensionError,
    NonFiniteError,
    VocabularyLookupError,
)

_seq_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A dense array that can take part in gradient computation.

    ``grad`` is ``None`` until a backward pass reaches the tensor; afterwards
    it has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.name = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# graph and backward pass
# ---------------------------------------------------------------------------


class Graph:
    """Ops reachable from an output, held in execution order."""

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen = set()
        ops = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                ops.append(t)
                stack.extend(t._parents)
        ops.sort(key=lambda t: t._seq)
        return cls(ops)

    def reversed(self):
        return reversed(self.ops)

    def __len__(self):
        return len(self.ops)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(.) to every reachable tensor with ``requires_grad``.

    Leaf gradients add onto any existing ``.grad``; call ``zero_grad`` between
    optimizer steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    graph = Graph.from_output(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in graph.reversed():
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            _check_finite(pg, f"backward of {node.name}")
            if p._backward is None:
                _accumulate(p, pg)
            elif id(p) in pending:
                pending[id(p)] = pending[id(p)] + pg
            else:
                pending[id(p)] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    out = a.data * c

    def bw(g):
        return (g * c,)

    return _result(out, (a,), bw, "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0).astype(x.dtype, copy=False)

    def bw(g):
        return (g * pos,)

    return _result(out, (x,), bw, "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid_np(x.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), bw, "sigmoid")


def softplus(x) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = as_tensor(x)
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    def bw(g):
        return (g * _sigmoid_np(z),)

    return _result(out, (x,), bw, "softplus")


def dropout(x, keep_prob: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout. Eval mode (or keep_prob == 1) returns ``x`` itself."""
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    x = as_tensor(x)
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    keep = rng.random(x.shape) < keep_prob
    factor = (keep / keep_prob).astype(x.dtype)
    out = x.data * factor

    def bw(g):
        return (g * factor,)

    return _result(out, (x,), bw, "dropout")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), bw, "reshape")


def slice_(x, key) -> Tensor:
    """Basic (non-fancy) slicing, e.g. ``slice_(x, np.s_[:3])``."""
    x = as_tensor(x)
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _result(out, (x,), bw, "slice")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    out = np.swapaxes(x.data, a1, a2)

    def bw(g):
        return (np.swapaxes(g, a1, a2),)

    return _result(out, (x,), bw, "swapaxes")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concat shapes {[t.shape for t in ts]} on axis {axis}") from exc
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(out, ts, bw, "concat")


def take_along_axis(x, idx: np.ndarray, axis: int) -> Tensor:
    """``np.take_along_axis`` with a scatter-add backward."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        index = list(np.indices(idx.shape, sparse=True))
        index[axis % x.ndim] = idx
        np.add.at(gx, tuple(index), g)
        return (gx,)

    return _result(out, (x,), bw, "take_along_axis")


def sliding_window(x, w: int) -> Tensor:
    """Windows of width 2w+1 along the second-to-last axis.

    ``x`` has shape (..., n, d); the result has shape (..., n, 2w+1, d) with
    ``out[..., i, j, :] = x[..., i - w + j, :]`` and zeros where that index
    falls outside [0, n-1].
    """
    x = as_tensor(x)
    if w < 0:
        raise ContractError(f"half-window must be >= 0, got {w}")
    n = x.shape[-2]
    k = 2 * w + 1
    pad = [(0, 0)] * x.ndim
    pad[-2] = (w, w)
    padded = np.pad(x.data, pad)
    out = np.stack([padded[..., j : j + n, :] for j in range(k)], axis=-2)

    def bw(g):
        gp = np.zeros_like(padded)
        for j in range(k):
            gp[..., j : j + n, :] += g[..., j, :]
        return (gp[..., w : w + n, :],)

    return _result(out, (x,), bw, "sliding_window")


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), bw, "reduce_sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def l2_norm_rows(x) -> Tensor:
    """Euclidean norm over the last axis."""
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (g[..., None] * x.data / safe[..., None] * (out > 0)[..., None],)

    return _result(out, (x,), bw, "l2_norm_rows")


def softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0.

    Raises DegenerateRowError when a row has no unmasked entry.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise DegenerateRowError("softmax row is fully masked")
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-8) -> Tensor:
    """Normalise the last axis to mean 0 / variance 1, then apply gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs a last axis of size >= 2, got {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgain, dbias

    return _result(out, (x, gain, bias), bw, "layer_norm")


def embedding_lookup(table, idx) -> Tensor:
    """Rows of ``table`` at integer ``idx``; index 0 yields zeros and no gradient."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise VocabularyLookupError(f"indices must be integers, got {idx.dtype}")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = idx[(idx < 0) | (idx >= vocab)].reshape(-1)[0]
        raise VocabularyLookupError(f"index {int(bad)} outside vocabulary [0, {vocab})")
    real = idx != 0
    out = table.data[idx] * real[..., None]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx[real], g[real])
        return (gt,)

    return _result(out, (table,), bw, "embedding_lookup")
