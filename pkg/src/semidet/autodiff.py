"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a contiguous numpy array (float32 or float64).
While a ``Tape`` is active, every operation involving a tracked tensor
appends a node with its backward rule; nodes are recorded in execution
order, so the tape is topologically sorted by construction and
``backward`` walks it once in reverse.

Only the kernels the detector actually needs are provided. Convolution
kernels live in :mod:`semidet.conv`.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are incompatible."""


_current_tape: "Tape | None" = None
_grad_enabled: bool = True


class Tape:
    """Ordered record of one forward pass.

    Single-writer: at most one tape may be active at a time, and a tape
    can be consumed by ``backward`` exactly once.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _current_tape
        if _current_tape is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _current_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _current_tape
        _current_tape = None
        return False


def active_tape() -> Tape | None:
    return _current_tape


@contextmanager
def no_grad():
    """Temporarily disable recording (e.g. teacher inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional numeric array participating in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def _tracked(self, tape: Tape) -> bool:
        return self.requires_grad or self._tape is tape

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic operators delegate to the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.data.dtype != like.data.dtype:
            raise ShapeError(
                f"dtype mismatch: {x.data.dtype} vs {like.data.dtype}"
            )
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _apply(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = _current_tape
    if (
        tape is not None
        and _grad_enabled
        and any(p._tracked(tape) for p in parents)
    ):
        out._tape = tape
        out.tape_id = len(tape.nodes)
        tape.nodes.append(_Node(out, parents, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf parameter reachable from ``loss``.

    ``loss`` must be scalar and recorded on a live tape; calling twice on
    the same tape raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss is detached: not recorded on an active tape")
    if tape.consumed:
        raise RuntimeError("tape already consumed; re-record the forward pass")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            if parent.requires_grad:
                parent.grad = pg if parent.grad is None else parent.grad + pg
            elif parent._tape is tape:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    return _apply(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    return _apply(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    return _apply(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data / b.data
    return _apply(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * out / b.data, b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _apply(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _apply(
        a.data ** p,
        (a,),
        lambda g: (g * p * a.data ** (p - 1.0),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _apply(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _apply(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _apply(out, (a,), lambda g: (g * (0.5 / out),))


def arctan(a: Tensor) -> Tensor:
    return _apply(
        np.arctan(a.data), (a,), lambda g: (g / (1.0 + a.data * a.data),)
    )


def relu(a: Tensor) -> Tensor:
    return _apply(
        np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),)
    )


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _apply(out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.data.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _apply(out, (a,), lambda g: (g * inside,))


def maximum(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    pick_a = a.data >= b.data
    return _apply(
        np.maximum(a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(g * pick_a, a.data.shape),
            _unbroadcast(g * ~pick_a, b.data.shape),
        ),
    )


def minimum(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    pick_a = a.data <= b.data
    return _apply(
        np.minimum(a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(g * pick_a, a.data.shape),
            _unbroadcast(g * ~pick_a, b.data.shape),
        ),
    )


# ------------------------------------------------------ reductions / shapes


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gk = g
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            gk = g.reshape(shape)
        return (np.broadcast_to(gk, a.data.shape),)

    return _apply(np.asarray(out, dtype=a.data.dtype), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=a.data.dtype)

    def bwd(g):
        gk = g / count
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            gk = gk.reshape(shape)
        return (np.broadcast_to(gk, a.data.shape),)

    return _apply(np.asarray(out, dtype=a.data.dtype), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    return _apply(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),)
    )


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _apply(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
    )


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select rows along ``axis``; backward scatter-adds into place."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)

    def bwd(g):
        acc = np.zeros_like(a.data)
        sel: list = [slice(None)] * a.ndim
        sel[axis] = idx
        np.add.at(acc, tuple(sel), g)
        return (acc,)

    return _apply(out, (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (cheaper backward than take)."""
    sel: list = [slice(None)] * a.ndim
    sel[axis] = slice(start, start + length)
    sel = tuple(sel)

    def bwd(g):
        acc = np.zeros_like(a.data)
        acc[sel] = g
        return (acc,)

    return _apply(np.ascontiguousarray(a.data[sel]), (a,), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply(data, tuple(tensors), bwd)


# ----------------------------------------------------------- normalization


def affine_channel_norm(
    x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5
) -> Tensor:
    """Per-sample channel normalization with learned affine.

    Each (sample, channel) plane is normalized by its own spatial mean
    and variance; ``gain``/``bias`` are broadcast as (1, C, 1, 1). The
    epsilon keeps constant channels finite (output zero there).
    """
    if x.ndim != 4:
        raise ShapeError(f"affine_channel_norm expects NCHW, got {x.shape}")
    c = x.shape[1]
    if gain.size != c or bias.size != c:
        raise ShapeError(
            f"gain/bias size {gain.size}/{bias.size} != channels {c}"
        )
    dt = x.data.dtype
    mu = x.data.mean(axis=(2, 3), keepdims=True, dtype=dt)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True, dtype=dt)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = xc * inv
    g4 = gain.data.reshape(1, c, 1, 1)
    out = xhat * g4 + bias.data.reshape(1, c, 1, 1)

    def bwd(g):
        gbias = g.sum(axis=(0, 2, 3)).reshape(bias.data.shape)
        ggain = (g * xhat).sum(axis=(0, 2, 3)).reshape(gain.data.shape)
        gh = g * g4
        m1 = gh.mean(axis=(2, 3), keepdims=True, dtype=dt)
        m2 = (gh * xhat).mean(axis=(2, 3), keepdims=True, dtype=dt)
        gx = inv * (gh - m1 - xhat * m2)
        return gx, ggain, gbias

    return _apply(out, (x, gain, bias), bwd)
