"""Dense float64 tensors with tape-based reverse-mode differentiation.

A ``Tape`` records every differentiable operation in execution order (which
is automatically a topological order); ``backward`` replays it in reverse.
One tape is meant to live for exactly one forward/backward cycle and is
consumed by ``backward``.

Broadcast rule: two operands combine elementwise when their shapes are
identical, or when one shape is a trailing suffix of the other; the smaller
operand is repeated along the missing leading axes. Anything else is a
``DimensionError``. The rule is symmetric: either operand may be the
smaller one.

Thread confinement: the active-tape stack is thread-local. A tape and the
tensors recorded on it belong to one logical thread at a time.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericalError, Stg2SeqError


class TapeError(Stg2SeqError):
    """A tape was used outside its contract (e.g. backward ran twice)."""


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    """The innermost tape currently recording on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one forward/backward cycle.

    Use as a context manager::

        with Tape() as tape:
            loss = build_loss(...)
        grads = backward(loss, tape)

    Operations performed while the tape is active are recorded iff their
    result requires gradients. ``backward`` consumes the tape; recording or
    differentiating on it afterwards raises ``TapeError``.
    """

    def __init__(self) -> None:
        # entries: (inputs, output, rule); rule maps the output gradient to
        # per-input gradients (None for inputs that need no gradient).
        self._entries: list[tuple[tuple["Tensor", ...], "Tensor", Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, inputs, output, rule) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward; use a fresh tape")
        self._entries.append((tuple(inputs), output, rule))


class Tensor:
    """A dense float64 array plus gradient metadata.

    Data is validated to be finite on construction, so any NaN/Inf produced
    by an operation surfaces immediately as a ``NumericalError`` instead of
    propagating silently.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericalError("tensor holds non-finite values (NaN/Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar (floats are promoted to constant scalar tensors) --

    def __add__(self, other):
        return elementwise(self, _as_tensor(other), "add")

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise(self, _as_tensor(other), "sub")

    def __rsub__(self, other):
        return elementwise(_as_tensor(other), self, "sub")

    def __mul__(self, other):
        return elementwise(self, _as_tensor(other), "mul")

    __rmul__ = __mul__

    def __neg__(self):
        return elementwise(self, Tensor(-1.0), "mul")

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def slice(self, axis: int, start: int, stop: int) -> "Tensor":
        return slice_axis(self, axis, start, stop)

    def sum(self, axis=None) -> "Tensor":
        return reduce(self, "sum", axis)

    def mean(self, axis=None) -> "Tensor":
        return reduce(self, "mean", axis)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap an op result, recording it when a tape is active and grads are needed."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = active_tape()
    if requires and tape is not None:
        tape._record(inputs, out, rule)
    return out


# ---------------------------------------------------------------------------
# broadcast helpers


def _broadcast_compatible(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    return big[len(big) - len(small):] == small


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes introduced by broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul needs (m,p) x (p,n), got {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def rule(g):
        return (
            g @ b_data.T if a.requires_grad else None,
            a_data.T @ g if b.requires_grad else None,
        )

    return _result(a_data @ b_data, (a, b), rule)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Elementwise add/sub/mul under the suffix broadcast rule."""
    if kind not in ("add", "sub", "mul"):
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if not _broadcast_compatible(a.shape, b.shape):
        raise DimensionError(
            f"shapes {a.shape} and {b.shape} are not equal and neither is a "
            f"trailing suffix of the other"
        )
    a_data, b_data = a.data, b.data
    if kind == "add":
        out = a_data + b_data

        def rule(g):
            return (
                _unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None,
            )

    elif kind == "sub":
        out = a_data - b_data

        def rule(g):
            return (
                _unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None,
            )

    else:
        out = a_data * b_data

        def rule(g):
            return (
                _unbroadcast(g * b_data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a_data, b.shape) if b.requires_grad else None,
            )

    return _result(out, (a, b), rule)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise sigmoid, tanh, or relu."""
    x_data = x.data
    if kind == "sigmoid":
        y = _stable_sigmoid(x_data)

        def rule(g):
            return (g * y * (1.0 - y),)

    elif kind == "tanh":
        y = np.tanh(x_data)

        def rule(g):
            return (g * (1.0 - y * y),)

    elif kind == "relu":
        y = np.maximum(x_data, 0.0)

        def rule(g):
            return (g * (x_data > 0.0),)

    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return _result(y, (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalization along ``axis`` with max-subtraction for stability."""
    rank = x.data.ndim
    if not -rank <= axis < rank:
        raise DimensionError(f"softmax axis {axis} out of range for rank {rank}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _result(y, (x,), rule)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"cannot reshape {old} ({x.size} elements) to {shape}")

    def rule(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), rule)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    rank = tensors[0].data.ndim
    if not -rank <= axis < rank:
        raise DimensionError(f"concat axis {axis} out of range for rank {rank}")
    axis = axis % rank
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != rank or other[:axis] + other[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise DimensionError(
                f"concat extents disagree off axis {axis}: {tensors[0].shape} vs {t.shape}"
            )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        grads = []
        for i, t in enumerate(tensors):
            if t.requires_grad:
                idx = (slice(None),) * axis + (slice(offsets[i], offsets[i + 1]),)
                grads.append(g[idx])
            else:
                grads.append(None)
        return tuple(grads)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    rank = x.data.ndim
    if not -rank <= axis < rank:
        raise DimensionError(f"slice axis {axis} out of range for rank {rank}")
    axis = axis % rank
    extent = x.shape[axis]
    if not 0 <= start <= stop <= extent:
        raise DimensionError(f"slice [{start}:{stop}] outside axis {axis} of extent {extent}")
    idx = (slice(None),) * axis + (slice(start, stop),)
    x_shape = x.shape

    def rule(g):
        full = np.zeros(x_shape)
        full[idx] = g
        return (full,)

    return _result(x.data[idx], (x,), rule)


def zero_pad(x: Tensor, axis: int, amount: int, position: str = "front") -> Tensor:
    """Insert ``amount`` zeros at the front or back of ``axis``."""
    if position not in ("front", "back"):
        raise ValueError(f"zero_pad position must be 'front' or 'back', got {position!r}")
    rank = x.data.ndim
    if not -rank <= axis < rank:
        raise DimensionError(f"zero_pad axis {axis} out of range for rank {rank}")
    axis = axis % rank
    if amount < 0:
        raise DimensionError(f"zero_pad amount must be non-negative, got {amount}")
    pad_shape = list(x.shape)
    pad_shape[axis] = amount
    pad = np.zeros(pad_shape)
    parts = (pad, x.data) if position == "front" else (x.data, pad)
    lo = amount if position == "front" else 0
    idx = (slice(None),) * axis + (slice(lo, lo + x.shape[axis]),)

    def rule(g):
        return (g[idx],)

    return _result(np.concatenate(parts, axis=axis), (x,), rule)


def reduce(x: Tensor, kind: str, axis=None) -> Tensor:
    """Sum or mean over one axis or over all elements (``axis=None``)."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduce kind {kind!r}")
    rank = x.data.ndim
    if axis is not None and not -rank <= axis < rank:
        raise DimensionError(f"reduce axis {axis} out of range for rank {rank}")
    x_shape = x.shape
    if axis is None:
        count = x.size
        out = x.data.sum() if kind == "sum" else x.data.mean()

        def rule(g):
            scale = g if kind == "sum" else g / count
            return (np.full(x_shape, scale),)

    else:
        axis = axis % rank
        count = x_shape[axis]
        out = x.data.sum(axis=axis) if kind == "sum" else x.data.mean(axis=axis)

        def rule(g):
            expanded = np.broadcast_to(np.expand_dims(g, axis), x_shape)
            return (expanded.copy() if kind == "sum" else expanded / count,)

    return _result(out, (x,), rule)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Differentiate ``loss`` through ``tape``.

    Returns a map from every requires_grad leaf recorded on the tape to the
    gradient of the loss with respect to it (zeros when no path reaches the
    loss), and stores the same array on each leaf's ``.grad``. The tape is
    consumed; a second call raises ``TapeError``.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise TapeError("backward already ran on this tape")
    tape._consumed = True

    produced = {id(out) for _, out, _ in tape._entries}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for inputs, out, rule in reversed(tape._entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue  # this result never fed into the loss
        for t, piece in zip(inputs, rule(g)):
            if piece is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + piece
            else:
                grads[key] = np.asarray(piece, dtype=np.float64)

    result: dict[Tensor, np.ndarray] = {}
    seen: set[int] = set()
    for inputs, _, _ in tape._entries:
        for t in inputs:
            if t.requires_grad and id(t) not in produced and id(t) not in seen:
                seen.add(id(t))
                g = grads.get(id(t))
                if g is None:
                    g = np.zeros_like(t.data)
                g = np.broadcast_to(g, t.data.shape).astype(np.float64, copy=True) \
                    if g.shape != t.data.shape else g
                t.grad = g
                result[t] = g
    return result


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative disagreement between reverse-mode and central differences.

    ``f`` must be a pure scalar-valued function of one tensor. Per
    coordinate the error is |g_auto - g_fd| / max(1e-8, |g_auto| + |g_fd|).
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    if y.data.size != 1:
        raise DimensionError(f"gradient_check needs a scalar-valued f, got shape {y.shape}")
    grads = backward(y, tape)
    g_auto = grads.get(leaf)
    if g_auto is None:
        g_auto = np.zeros_like(leaf.data)

    g_fd = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = f(Tensor(bumped.reshape(leaf.data.shape))).item()
        bumped[i] = flat[i] - step
        f_minus = f(Tensor(bumped.reshape(leaf.data.shape))).item()
        fd_flat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(1e-8, np.abs(g_auto) + np.abs(g_fd))
    return float((np.abs(g_auto - g_fd) / denom).max())
