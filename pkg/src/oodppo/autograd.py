"""Reverse-mode differentiation over numpy arrays.

Operations performed while a :class:`GradTape` is active are appended to it in
execution order; :func:`backward` replays the tape in reverse to produce one
gradient per requested leaf.  Outside a tape every op is a plain numpy call
wrapped in a :class:`Tensor`, which is what inference uses.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.vjp: Callable[[np.ndarray], list] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))


class GradTape:
    """Ordered record of differentiable ops executed inside ``with tape:``."""

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._stack().pop()

    @classmethod
    def _stack(cls) -> list["GradTape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def current(cls) -> "GradTape | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(out: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    _check_finite(out, op)
    result = Tensor(out)
    tape = GradTape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result.vjp = vjp
        result.name = op
        tape.nodes.append(result)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _record(
        out, (a, b),
        lambda g: [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))],
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _record(
        out, (a, b),
        lambda g: [(a, _unbroadcast(g, a.shape)), (b, -_unbroadcast(g, b.shape))],
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _record(
        out, (a, b),
        lambda g: [(a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))],
        "mul",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return _record(out, (a, b), vjp, "matmul")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: [(x, g * (1.0 - out * out))], "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: [(x, g * out)], "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _record(out, (x,), lambda g: [(x, g / x.data)], "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    out = x.data * x.data
    return _record(out, (x,), lambda g: [(x, 2.0 * g * x.data)], "square")


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(g, x.shape).copy())]

    return _record(np.asarray(out), (x,), vjp, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.minimum(a.data, b.data)
    pick_a = a.data <= b.data

    def vjp(g):
        return [
            (a, _unbroadcast(np.where(pick_a, g, 0.0), a.shape)),
            (b, _unbroadcast(np.where(pick_a, 0.0, g), b.shape)),
        ]

    return _record(out, (a, b), vjp, "minimum")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(out, (x,), lambda g: [(x, np.where(inside, g, 0.0))], "clip")


def log_softmax(x) -> Tensor:
    """Log-softmax over the last axis, stabilised by the row max."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def vjp(g):
        return [(x, g - probs * g.sum(axis=-1, keepdims=True))]

    return _record(out, (x,), vjp, "log_softmax")


def pick(x, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, index), g)
        return [(x, gx)]

    return _record(out, (x,), vjp, "pick")


def take_rows(x, index: np.ndarray) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return [(x, gx)]

    return _record(out, (x,), vjp, "take_rows")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return list(zip(xs, np.split(g, bounds, axis=axis)))

    return _record(out, xs, vjp, "concat")


def backward(tape: GradTape, loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to each of ``params``."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in node.vjp(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape))
    for g in out:
        _check_finite(g, "backward")
    return out


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda g: [(x, g.reshape(x.shape))], "reshape")
