"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every primitive checks its result for NaN/Inf and raises
:class:`NonFiniteError` instead of propagating bad values. Elementwise
broadcasting is limited to equal shapes and scalar-vs-tensor; anything else
goes through :func:`broadcast_to` explicitly.

Usage::

    with Tape() as tape:
        y = (x @ w).tanh().sum()
    grads = backward(tape, y)
    grads[w]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "NonFiniteError",
    "ShapeError",
    "backward",
    "custom_op",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "clip",
    "matmul",
    "softmax",
    "log_softmax",
    "attention",
    "layer_norm",
    "broadcast_to",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "take",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of primitive applications.

    A tape is entered as a context manager; every primitive evaluated inside
    the block appends one record. Tapes nest (the innermost one records) and
    are thread-local.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> Tape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


class Tensor:
    """An n-dimensional float64 array that can participate in a tape."""

    __slots__ = ("data", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
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
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by python scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def custom_op(
    op: str,
    out: np.ndarray,
    inputs: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out`` as a tape primitive with the given vector-Jacobian product.

    ``vjp(g)`` receives the output cotangent and returns one gradient (or
    ``None``) per input, each shaped like that input.
    """
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor._wrap(out)
    tape = _active_tape()
    if tape is not None:
        tape.records.append(_Record(op, tuple(inputs), result, vjp))
    return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _elementwise_pair(a, b, name: str) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} need explicit broadcast_to")
    return a, b


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    # Reduce a gradient back to a 0-d operand that was broadcast as a scalar.
    return np.asarray(g.sum()) if t.ndim == 0 and g.ndim != 0 else g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _elementwise_pair(a, b, "add")
    return custom_op("add", a.data + b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a, b) -> Tensor:
    a, b = _elementwise_pair(a, b, "sub")
    return custom_op("sub", a.data - b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _elementwise_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return custom_op(
        "mul", ad * bd, (a, b), lambda g: (_unscalar(g * bd, a), _unscalar(g * ad, b))
    )


def neg(a: Tensor) -> Tensor:
    return custom_op("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return custom_op("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form: exp only ever sees non-positive arguments
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return custom_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return custom_op("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return custom_op("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise FloatingPointError("log of non-positive value")
    x = a.data
    return custom_op("log", np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; the gradient is zero where clamping is active."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return custom_op("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return custom_op("sum", a.data.sum(axis=axis), (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return custom_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return custom_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; gradients are summed back."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as err:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from err

    def vjp(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return custom_op("broadcast_to", out.copy(), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return custom_op("concat", out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return custom_op("stack", out, tensors, vjp)


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; the backward pass scatter-adds."""
    if isinstance(key, Tensor):
        raise TypeError("index with integer arrays, not tensors")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return custom_op("index", a.data[key], (a,), vjp)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup, frame gathering)."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape
    if idx.size and (idx.min() < 0 or idx.max() >= shape[axis]):
        raise IndexError("take: index out of range")

    key = (slice(None),) * (axis % a.ndim) + (idx,)

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return custom_op("take", np.take(a.data, idx, axis=axis), (a,), vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has the same
    leading axes as ``a``. A 1-D ``a`` is treated as a row vector.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim < 2:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ in {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ in {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return custom_op("matmul", ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------- normalizers


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with max-subtraction."""
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax needs a non-empty last dimension")
    y = _softmax(a.data)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op("softmax", y, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("log_softmax needs a non-empty last dimension")
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    y = x - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return custom_op("log_softmax", y, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm: gain/bias must match the last dimension")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    n = xd.shape[-1]

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gx_hat = g * gd
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom_op("layer_norm", xhat * gd + bias.data, (x, gain, bias), vjp)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None, bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is broadcastable to the ``(..., T, T)`` score shape and is either
    boolean (True = may attend) or additive with entries in ``{0, -inf}``.
    ``bias`` is an optional differentiable additive score term whose shape
    matches the trailing axes of the scores (e.g. ``(heads, T, T)``).
    Returns ``(output, weights)``; the weights tensor is detached from the
    tape and exists for inspection.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: incompatible q/k/v {q.shape} {k.shape} {v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    scale = 1.0 / np.sqrt(qd.shape[-1])
    scores = qd @ np.swapaxes(kd, -1, -2) * scale
    if bias is not None:
        if bias.ndim > scores.ndim or scores.shape[scores.ndim - bias.ndim :] != bias.shape:
            raise ShapeError(f"attention: bias {bias.shape} does not match scores {scores.shape}")
        scores = scores + bias.data
    if mask is not None:
        m = np.asarray(mask)
        allowed = m if m.dtype == bool else np.isfinite(m)
        allowed = np.broadcast_to(allowed, scores.shape)
        if not allowed.any(axis=-1).all():
            raise ValueError("attention: a query row is fully masked")
        scores = np.where(allowed, scores, -np.inf)
    w = _softmax(scores)

    def vjp(g):
        gw = g @ np.swapaxes(vd, -1, -2)
        gz = w * (gw - (gw * w).sum(axis=-1, keepdims=True))
        gs = gz * scale
        grads = [gs @ kd, np.swapaxes(gs, -1, -2) @ qd, np.swapaxes(w, -1, -2) @ g]
        if bias is not None:
            lead = tuple(range(gz.ndim - bias.ndim))
            grads.append(gz.sum(axis=lead) if lead else gz)
        return grads

    inputs = (q, k, v) if bias is None else (q, k, v, bias)
    out = custom_op("attention", w @ vd, inputs, vjp)
    return out, Tensor._wrap(w)


# ---------------------------------------------------------------- backward


class Gradients:
    """Gradient lookup keyed by tensor identity.

    Tensors never reached by the backward pass map to zeros.
    """

    def __init__(self, grads: dict[int, np.ndarray], keep: list[Tensor]):
        self._grads = grads
        self._keep = keep

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        return np.zeros(t.shape) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Propagate d(loss)/d(.) through ``tape`` in exact reverse record order."""
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    keep: list[Tensor] = [loss]
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
                keep.append(inp)
    return Gradients(grads, keep)


def grad_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Iterable[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Compare tape gradients with central differences.

    ``f`` maps ``x`` to a scalar when ``x`` is a single tensor; for a list of
    tensors ``f`` takes no arguments and closes over them (their ``.data`` is
    perturbed in place and restored). Returns the largest componentwise
    ``|g_ad - g_fd| / max(floor, |g_ad| + |g_fd|)``. Raising ``floor`` turns the
    check absolute for components near zero, where central differences are
    dominated by roundoff (about ``|loss| * 1e-16 / eps``).
    """
    if isinstance(x, Tensor):
        params = [x]
        call = lambda: f(x)  # noqa: E731
    else:
        params = list(x)
        call = f

    with Tape() as tape:
        loss = call()
    grads = backward(tape, loss)

    worst = 0.0
    for p in params:
        g_ad = grads[p]
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = call().item()
            flat[i] = orig - eps
            down = call().item()
            flat[i] = orig
            g_fd = (up - down) / (2 * eps)
            a = g_ad.reshape(-1)[i]
            err = abs(a - g_fd) / max(floor, abs(a) + abs(g_fd))
            if not np.isfinite(err):
                return float("nan")
            worst = max(worst, err)
    return worst
