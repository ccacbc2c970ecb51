"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations executed inside an active :class:`Tape` are recorded in
execution order; :meth:`Tape.backward` replays them in exact reverse order.
Outside a tape, operations simply compute values (inference mode).

Only scalar-with-tensor broadcasting is supported: an operand is either the
same shape as its partner or holds a single element.
"""

from __future__ import annotations

import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "badgan_active_tape", default=None
)
_tape_ids = itertools.count(1)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operand lies outside the domain of the operation."""


class ContractError(RuntimeError):
    """A tape was used in a way its contract forbids."""


class Tensor:
    __slots__ = ("values", "_grad", "requires_grad", "tape_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; nested tapes are allowed, the innermost one
    records. A tape is single-threaded; distinct threads each own theirs.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        out.tape_id = self.id
        self.nodes.append((out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape_id not in (None, self.id):
            raise ContractError("loss was recorded on a different tape")
        seed = np.ones_like(loss.values)
        loss._grad = seed if loss._grad is None else loss._grad + seed
        for out, parents, fn in reversed(self.nodes):
            if out._grad is None:
                continue
            parent_grads = fn(out._grad)
            for p, g in zip(parents, parent_grads):
                if g is None or not p.requires_grad:
                    continue
                p._grad = g.copy() if p._grad is None else p._grad + g


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Backpropagate from a scalar ``loss`` through ``tape`` (default: active tape)."""
    tape = tape or _active_tape.get()
    if tape is None:
        raise ContractError("no tape recorded this loss")
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(values: np.ndarray, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = _active_tape.get()
        if tape is not None:
            tape.record(out, parents, fn)
    return out


def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")


def _fold(g: np.ndarray, like: Tensor) -> np.ndarray:
    # undo scalar broadcasting
    if g.shape == like.shape:
        return g
    return np.full(like.shape, g.sum())


# -- binary elementwise -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _emit(a.values + b.values, (a, b), lambda g: (_fold(g, a), _fold(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _emit(a.values - b.values, (a, b), lambda g: (_fold(g, a), _fold(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (_fold(g * bv, a), _fold(g * av, b)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return _emit(out, (a, b), lambda g: (_fold(g / bv, a), _fold(-g * out / bv, b)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    vals = [t.values for t in ts]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def fn(g):
        return tuple(
            np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _emit(out, ts, fn)


def rows(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a 2D tensor."""
    x = as_tensor(x)
    if x.values.ndim != 2 or not 0 <= start <= stop <= x.shape[0]:
        raise DimensionError(f"rows: bad range {start}:{stop} for shape {x.shape}")

    def fn(g):
        full = np.zeros_like(x.values)
        full[start:stop] = g
        return (full,)

    return _emit(x.values[start:stop], (x,), fn)


# -- unary elementwise ------------------------------------------------------


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _emit(-x.values, (x,), lambda g: (-g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return _emit(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.values > 0, 1.0, slope)
    return _emit(x.values * scale, (x,), lambda g: (g * scale,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.values)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.values
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.values)
    return _emit(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.values <= 0):
        raise DomainError("log of a non-positive value")
    v = x.values
    return _emit(np.log(v), (x,), lambda g: (g / v,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.values < 0):
        raise DomainError("sqrt of a negative value")
    r = np.sqrt(x.values)
    return _emit(r, (x,), lambda g: (g * 0.5 / r,))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.values
    return _emit(v * v, (x,), lambda g: (2.0 * g * v,))


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = as_tensor(x)
    v = x.values
    out = np.clip(v, lo if lo is not None else -np.inf, hi if hi is not None else np.inf)
    inside = out == v
    return _emit(out, (x,), lambda g: (g * inside,))


# -- shape and reductions ---------------------------------------------------


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return _emit(x.values.T.copy(), (x,), lambda g: (g.T,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _emit(out, (x,), lambda g: (g.reshape(orig),))


def _expand(g: np.ndarray, x: Tensor, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)
    return _emit(np.asarray(out), (x,), lambda g: (_expand(g, x, axis, keepdims).copy(),))


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    out = x.values.mean(axis=axis, keepdims=keepdims)
    return _emit(np.asarray(out), (x,), lambda g: (_expand(g, x, axis, keepdims) / n,))


def reduce(op: str, x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if op == "sum":
        return sum(x, axis, keepdims)
    if op == "mean":
        return mean(x, axis, keepdims)
    raise ValueError(f"unknown reduction {op!r}")


def logsumexp(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    v = x.values
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    soft = np.exp(v - s)
    out = s if keepdims else (s.reshape(()) if axis is None else np.squeeze(s, axis=axis))

    def fn(g):
        g = g if keepdims or axis is None else np.expand_dims(g, axis)
        return (g * soft,)

    return _emit(out, (x,), fn)


def external(x, values: np.ndarray, jacobian: np.ndarray) -> Tensor:
    """Row-wise scalar function of ``x`` with a caller-supplied gradient.

    ``values[i]`` is f(x[i]) and ``jacobian[i]`` its gradient with respect
    to row ``x[i]``. Used to splice closed-form functions (e.g. a density)
    into the tape.
    """
    x = as_tensor(x)
    values = np.asarray(values, dtype=np.float64)
    jacobian = np.asarray(jacobian, dtype=np.float64)
    if values.shape != x.shape[:1] or jacobian.shape != x.shape:
        raise DimensionError("external: values/jacobian do not match input rows")
    return _emit(values, (x,), lambda g: (g[:, None] * jacobian,))


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch one of the named elementwise primitives."""
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
        "relu": relu, "leaky_relu": leaky_relu, "tanh": tanh, "sigmoid": sigmoid,
        "exp": exp, "log": log, "sqrt": sqrt, "square": square, "clamp": clamp,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# -- gradient checking ------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``param``."""
    flat = param.values.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().values)
        flat[i] = orig - h
        fm = float(fn().values)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps components that are zero up to finite-difference noise
    from dominating.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(
    fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5, floor: float = 1e-4
) -> float:
    """Max relative error between tape gradients and central differences."""
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    errs = [relative_error(a, numerical_grad(fn, p, h), floor) for a, p in zip(analytic, params)]
    return max(errs) if errs else 0.0
