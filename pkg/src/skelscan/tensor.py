"""Dense tensors with reverse-mode differentiation over a recorded tape.

Every differentiable operation appends a node to the active :class:`Tape`
holding its output, its inputs and a closure mapping the output gradient to
input gradients.  ``Tape.backward`` walks the nodes in reverse insertion order,
so gradient accumulation order is fixed and repeated backward passes are
bit-identical.

Tapes are thread-local: each thread records onto its own default tape unless a
``with Tape():`` block is active.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DivideByZeroError, NumericError, ShapeError, ContractError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "set_precision",
    "get_dtype",
    "precision",
    "set_debug",
    "matmul",
    "elementwise",
    "softmax",
    "log_softmax",
    "layer_norm",
    "concat",
    "stack",
    "backward",
]

# -- global configuration ----------------------------------------------------

_DTYPES = {"float32": np.float32, "float64": np.float64}


class _Config:
    dtype = np.float32
    debug = os.environ.get("SKELSCAN_DEBUG", "0") not in ("", "0")


_config = _Config()


def set_precision(name: str) -> None:
    """Select the compute precision for newly created tensors ('float32'/'float64')."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _config.dtype = _DTYPES[name]


def get_dtype():
    return _config.dtype


@contextlib.contextmanager
def precision(name: str):
    old = _config.dtype
    set_precision(name)
    try:
        yield
    finally:
        _config.dtype = old


def set_debug(flag: bool) -> None:
    """In debug mode every op asserts its output is finite."""
    _config.debug = bool(flag)


# -- tape ----------------------------------------------------------------------

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
    return stack


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "kind")

    def __init__(self, out, parents, backward_fn, kind):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.kind = kind


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @staticmethod
    def current() -> "Tape":
        return _tape_stack()[-1]

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward_fn, kind: str) -> None:
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(_Node(out, tuple(parents), backward_fn, kind))

    def clear(self) -> None:
        for node in self.nodes:
            node.out._tape = None
            node.out._index = -1
        self.nodes.clear()

    def backward(self, root: "Tensor", grad: np.ndarray | None = None) -> None:
        if root.data.size != 1 and grad is None:
            raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
        if root._tape is not self:
            if root.requires_grad and root._tape is None:
                # root is itself a leaf
                g = np.ones_like(root.data) if grad is None else grad
                root.grad = g if root.grad is None else root.grad + g
                return
            raise ContractError("root was not recorded on this tape")
        grads: dict[int, np.ndarray] = {
            id(root): np.ones_like(root.data) if grad is None else np.asarray(grad, root.data.dtype)
        }
        for i in range(root._index, -1, -1):
            node = self.nodes[i]
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, gp in zip(node.parents, parent_grads):
                if gp is None or not p.requires_grad:
                    continue
                gp = _unbroadcast(gp, p.data.shape).astype(p.data.dtype, copy=False)
                if p._tape is None:
                    p.grad = gp.copy() if p.grad is None else p.grad + gp
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = gp if prev is None else prev + gp


def backward(root: "Tensor") -> None:
    """Differentiate scalar ``root``; leaves receive ``.grad``."""
    root.backward()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- tensor --------------------------------------------------------------------


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=dtype or _config.dtype)


class Tensor:
    """Dense row-major real array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _config.dtype, copy=None)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index = -1

    # basic properties
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self):
        return self.shape[0]

    def backward(self) -> None:
        tape = self._tape if self._tape is not None else Tape.current()
        tape.backward(self)

    # arithmetic
    def __add__(self, other):
        return elementwise("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", _lift(other, self), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            if other == 0:
                raise DivideByZeroError("division by scalar zero")
            return elementwise("mul", self, 1.0 / other)
        return elementwise("mul", self, elementwise("reciprocal", other))

    def __neg__(self):
        return elementwise("negate", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    # shape ops
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _permute(self, tuple(axes))

    def flip(self, axis: int):
        return _flip(self, axis)

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _mean(self, axis, keepdims)

    # pointwise helpers
    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def relu(self):
        return elementwise("relu", self)

    def silu(self):
        return elementwise("silu", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def softplus(self):
        return elementwise("softplus", self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype), dtype=like.data.dtype)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_config.dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_config.dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, kind: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out._index = -1
    out.requires_grad = False
    if _config.debug and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {kind}")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        Tape.current().record(out, parents, backward_fn, kind)
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn, kind: str) -> Tensor:
    """Register an externally computed result with a hand-written gradient.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    return _make(data, parents, backward_fn, kind)


# -- elementwise ---------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def elementwise(kind: str, *args) -> Tensor:
    """Pointwise operation; binary kinds broadcast with trailing-axis alignment.

    Unary kinds: silu, relu, exp, log, sqrt, sigmoid, softplus, reciprocal, negate.
    Binary kinds: add, sub, mul.
    """
    if kind in ("add", "sub", "mul"):
        if len(args) != 2:
            raise TypeError(f"{kind} takes two operands")
        a, b = args
        if not isinstance(a, Tensor):
            a = _lift(a, b)
        b = _lift(b, a)
        try:
            shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not broadcastable") from None
        del shape
        ad, bd = a.data, b.data
        if kind == "add":
            return _make(ad + bd, (a, b), lambda g: (g, g), "add")
        if kind == "sub":
            return _make(ad - bd, (a, b), lambda g: (g, -g), "sub")
        return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")

    if len(args) != 1:
        raise TypeError(f"{kind} takes one operand")
    (x,) = args
    if not isinstance(x, Tensor):
        x = Tensor(x)
    xd = x.data
    if kind == "negate":
        return _make(-xd, (x,), lambda g: (-g,), kind)
    if kind == "exp":
        out = np.exp(xd)
        return _make(out, (x,), lambda g: (g * out,), kind)
    if kind == "log":
        if np.any(xd <= 0):
            raise NumericError("log of non-positive value")
        return _make(np.log(xd), (x,), lambda g: (g / xd,), kind)
    if kind == "sqrt":
        if np.any(xd < 0):
            raise NumericError("sqrt of negative value")
        out = np.sqrt(xd)
        return _make(out, (x,), lambda g: (g * 0.5 / out,), kind)
    if kind == "reciprocal":
        if np.any(xd == 0):
            raise DivideByZeroError("reciprocal of zero")
        out = 1.0 / xd
        return _make(out, (x,), lambda g: (-g * out * out,), kind)
    if kind == "relu":
        mask = xd > 0
        return _make(xd * mask, (x,), lambda g: (g * mask,), kind)
    if kind == "sigmoid":
        s = _sigmoid(xd)
        return _make(s, (x,), lambda g: (g * s * (1 - s),), kind)
    if kind == "silu":
        s = _sigmoid(xd)
        return _make(xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),), kind)
    if kind == "softplus":
        out = np.logaddexp(0, xd).astype(xd.dtype, copy=False)
        return _make(out, (x,), lambda g: (g * _sigmoid(xd),), kind)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- contractions and reductions ---------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; batch axes broadcast."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), back, "matmul")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _sum(x: Tensor, axis, keepdims) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (x,), back, "sum")


def _mean(x: Tensor, axis, keepdims) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return _sum(x, axis, keepdims) * (1.0 / n)


# -- shape manipulation ----------------------------------------------------------


def _reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def _permute(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "permute")


def _flip(x: Tensor, axis: int) -> Tensor:
    return _make(np.ascontiguousarray(np.flip(x.data, axis)), (x,), lambda g: (np.flip(g, axis),), "flip")


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(x.data[index]), (x,), back, "getitem")


def _has_advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    axis %= ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    expanded = [t.reshape(t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def pad_time_left(x: Tensor, axis: int, width: int) -> Tensor:
    """Zero-pad ``width`` entries at the start of ``axis``."""
    if width == 0:
        return x
    axis %= x.ndim
    pad = [(0, 0)] * x.ndim
    pad[axis] = (width, 0)
    n = x.shape[axis]

    def back(g):
        return (np.take(g, np.arange(width, width + n), axis=axis),)

    return _make(np.pad(x.data, pad), (x,), back, "pad")


def shift_groups(x: Tensor, axis: int, channel_axis: int, offsets: np.ndarray, cyclic: bool = True) -> Tensor:
    """out[..., c, ..., t, ...] = x[..., c, ..., t + offsets[c], ...].

    With ``cyclic`` the time index wraps modulo the axis length, otherwise
    out-of-range reads are zero.
    """
    axis %= x.ndim
    channel_axis %= x.ndim
    n = x.shape[axis]
    offsets = np.asarray(offsets, dtype=np.int64)
    groups = [(int(o), np.flatnonzero(offsets == o)) for o in np.unique(offsets)]

    def _sel(ch):
        idx = [slice(None)] * x.ndim
        idx[channel_axis] = ch
        return tuple(idx)

    def _shift(arr, off, sign):
        rolled = np.roll(arr, -sign * off, axis=axis)
        if not cyclic and off != 0:
            # positions whose source fell outside [0, n)
            t = np.arange(n)
            src = t + sign * off
            bad = (src < 0) | (src >= n)
            shape = [1] * arr.ndim
            shape[axis] = n
            rolled = rolled * (~bad).reshape(shape)
        return rolled

    xd = x.data
    out = np.empty_like(xd)
    for off, ch in groups:
        sel = _sel(ch)
        out[sel] = _shift(xd[sel], off, 1)

    def back(g):
        gx = np.empty_like(g)
        for off, ch in groups:
            sel = _sel(ch)
            gx[sel] = _shift(g[sel], -off, 1)
        return (gx,)

    return _make(out, (x,), back, "shift_groups")


# -- normalisation ---------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, axis: int = -1, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis``, then apply gamma/beta."""
    axis %= x.ndim
    n = x.shape[axis]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.size != n:
            raise ShapeError(f"layer_norm: {name} has {p.size} entries, axis has {n}")
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    if eps == 0:
        inv = np.where(var > 0, 1.0 / np.sqrt(np.where(var > 0, var, 1)), 0.0).astype(xd.dtype)
    else:
        inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc * inv

    def back(g):
        return (inv * (g - g.mean(axis=axis, keepdims=True)
                       - xhat * (g * xhat).mean(axis=axis, keepdims=True)),)

    normed = _make(xhat, (x,), back, "layer_norm")
    bshape = [1] * x.ndim
    bshape[axis] = n
    if gamma is not None:
        normed = normed * gamma.reshape(bshape)
    if beta is not None:
        normed = normed + beta.reshape(bshape)
    return normed


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return total ** 0.5


OpFn = Callable[..., Tensor]
