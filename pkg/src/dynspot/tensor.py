"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations performed while a :class:`Tape` is active are recorded together
with their backward rules; :func:`backward` replays the tape in reverse.
Tensors are immutable, so a recorded operand can never change under the tape.

    >>> x = Tensor([[0.0, 1.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sigmoid(x).sum()
    >>> grads = backward(y, tape)
    >>> grads[x].round(4).tolist()
    [[0.25, 0.1966]]
"""

from __future__ import annotations

import contextvars
from collections.abc import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "grad_check",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "sigmoid",
    "relu",
    "softplus",
    "log",
    "sin",
    "cos",
    "absolute",
    "softmax",
    "layer_norm",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "take",
    "concat",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinite values."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"{op}: produced non-finite values")


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "dynspot_active_tape", default=None
)


class Tensor:
    """Immutable n-dimensional array of doubles.

    ``requires_grad`` marks a leaf whose gradient should be reported by
    :func:`backward`. Results of recorded operations inherit the flag.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("Tensor", "Tensor: data contains non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        # Internal constructor for op results: no copy, finiteness checked by caller.
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("Tensor division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class _Record:
    __slots__ = ("op", "out", "inputs", "backward_fn")

    def __init__(self, op, out, inputs, backward_fn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block whose
    operands require gradients are appended in execution order, which is
    already a topological order of the computation.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op)
    tape = _ACTIVE_TAPE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, track)
    if track:
        tape.records.append(_Record(op, out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _finish(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _finish("scale", a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _finish("matmul", np.matmul(ad, bd), (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise unary

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _finish("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _finish("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log", "log: argument must be strictly positive")
    return _finish("log", np.log(x), (a,), lambda g: (g / x,))


def sin(a: Tensor) -> Tensor:
    x = a.data
    return _finish("sin", np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a: Tensor) -> Tensor:
    x = a.data
    return _finish("cos", np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _finish("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


# ---------------------------------------------------------------------------
# normalisation

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", s, (a,), bw)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise gain and shift."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gamma.shape} / shift {beta.shape} do not match width {d} of {a.shape}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _finish("layer_norm", xhat * gd + beta.data, (a, gamma, beta), bw)


# ---------------------------------------------------------------------------
# reductions and structural ops

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    src = a.shape
    return _finish("reshape", out.copy(), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _finish(
        "transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
        lambda g: (g.transpose(inv),),
    )


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries (rows by default) by integer index; repeats allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"take: index out of range for axis {axis} of {a.shape}")
    src = a.shape

    def bw(g):
        out = np.zeros(src)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _finish("take", np.take(a.data, idx, axis=axis), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(constant(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not conform on axis {axis}"
        ) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _finish("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every leaf on ``tape``.

    Returns a dict keyed by leaf tensor (identity). Leaves that were recorded
    but do not influence ``loss`` map to zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for rec in tape.records:
        produced.add(id(rec.out))
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t

    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        parts = rec.backward_fn(g)
        for t, gt in zip(rec.inputs, parts):
            if not t.requires_grad or gt is None:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gt if prev is None else prev + gt

    return {t: grads.get(k, np.zeros(t.shape)) for k, t in leaves.items()}


def grad_check(
    fn: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between taped gradients and central differences.

    ``fn`` maps the tensors in ``point`` to a scalar. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``; with ``max_coords`` only a
    random subset of coordinates (across all tensors) is probed.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    single = isinstance(point, Tensor)
    pts = [point] if single else list(point)
    leaves = [Tensor(p.data, requires_grad=True) for p in pts]
    with Tape() as tape:
        out = fn(*leaves)
    grads = backward(out, tape) if len(tape) else {}
    analytic = [grads.get(t, np.zeros(t.shape)) for t in leaves]

    coords = [(k, i) for k, p in enumerate(pts) for i in range(p.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in np.sort(pick)]

    def evaluate(k, i, delta):
        args = []
        for j, p in enumerate(pts):
            if j == k:
                flat = p.data.reshape(-1).copy()
                flat[i] += delta
                args.append(Tensor(flat.reshape(p.shape)))
            else:
                args.append(p)
        return fn(*args).item()

    worst = 0.0
    for k, i in coords:
        num = (evaluate(k, i, step) - evaluate(k, i, -step)) / (2 * step)
        ana = analytic[k].reshape(-1)[i]
        worst = max(worst, abs(ana - num) / max(1.0, abs(ana)))
    return worst
