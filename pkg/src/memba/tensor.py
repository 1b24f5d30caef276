"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`GradRecord` is an ordered list of primitive operations.  While a
record is active (``with GradRecord() as rec:``), every primitive whose inputs
require gradients appends one entry holding its inputs and a local backward
rule.  :func:`backward` replays the entries in reverse order.  Outside an
active record nothing is recorded, which is the inference path.

Gradients are keyed by tensor identity.  A record may be consumed by exactly
one backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not compose."""


class NumericalError(ValueError):
    """Raised when values leave the domain an operation is defined on."""


class RecordError(RuntimeError):
    """Raised on misuse of a gradient record."""


_DEFAULT_DTYPE = np.float64
_ACTIVE: list["GradRecord"] = []


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """N-dimensional array that can take part in a gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "_record", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._record: GradRecord | None = None

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class _Entry:
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


@dataclass
class GradRecord:
    """Ordered list of recorded primitives for one forward/backward pass."""

    entries: list[_Entry] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "GradRecord":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.entries)


class no_record:
    """Suspend recording inside a block (used by optimizers and probes)."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants take the dtype of the tensor operand so float32 stays float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _emit(name: str, out: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    result = Tensor(out)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        rec = _ACTIVE[-1]
        if rec.consumed:
            raise RecordError("cannot record into a record that was already consumed by backward")
        result.requires_grad = True
        result._record = rec
        rec.entries.append(_Entry(tuple(inputs), result, rule, name))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(*shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as err:
        raise ShapeError(f"shapes {' and '.join(map(str, shapes))} do not broadcast") from err


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), rule)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# elementwise unary ops


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("power", ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return _emit("silu", x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated as max(x, 0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _emit("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def reset(a, v_th: float) -> Tensor:
    """Zero every entry strictly above ``v_th``; keep the rest.

    The backward rule is the almost-everywhere derivative: identity on kept
    entries, zero on reset entries.
    """
    a = as_tensor(a)
    keep = ~(a.data > v_th)
    return _emit("reset", np.where(keep, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * keep,))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _emit(
        "where",
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul needs operands of rank >= 1")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2:
        _broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data
    out = ad @ bd

    def rule(g):
        a2 = ad if ad.ndim > 1 else ad[None, :]
        b2 = bd if bd.ndim > 1 else bd[:, None]
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            if ad.ndim == 1:
                ga = np.squeeze(ga, -2)
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            gb = np.swapaxes(a2, -1, -2) @ g2
            if bd.ndim == 1:
                gb = np.squeeze(gb, -1)
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), rule)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from err
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    """Basic slicing / integer indexing; gradient scatters back."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _emit("getitem", a.data[index], (a,), rule)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit("take_rows", table.data[ids], (table,), rule)


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(str(err)) from err
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concatenate", out, tensors, rule)


def split(a, sizes: int | Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into ``sizes`` pieces (an int means equal parts)."""
    a = as_tensor(a)
    n = a.shape[axis]
    if isinstance(sizes, int):
        if sizes < 1 or n % sizes:
            raise ShapeError(f"cannot split extent {n} into {sizes} equal parts")
        sizes = [n // sizes] * sizes
    if int(np.sum(sizes)) != n:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {n}")
    out, start = [], 0
    ax = axis % a.ndim
    for s in sizes:
        idx = (slice(None),) * ax + (slice(start, start + s),)
        out.append(getitem(a, idx))
        start += s
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concatenate(expanded, axis=axis)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes) if axes else 1
    shape = a.shape

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), rule)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if labels.shape != z.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {z.shape}")
    mask = np.ones(labels.shape, bool) if mask is None else np.asarray(mask, bool)
    count = max(int(mask.sum()), 1)
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    safe = np.where(mask, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def rule(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], -1) - 1.0, -1)
        return (g * p * (mask[..., None] / count).astype(z.dtype),)

    return _emit("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), rule)


def mse(pred, target: np.ndarray) -> Tensor:
    pred = as_tensor(pred)
    diff = pred.data - np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    n = diff.size
    return _emit("mse", np.asarray((diff**2).mean(), dtype=pred.dtype), (pred,), lambda g: (g * 2.0 * diff / n,))


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-replay the record that produced ``loss``.

    Returns a map from ``id(tensor)`` to gradient for every tensor reached.
    Leaves that require gradients get ``.grad`` set (accumulated if already
    present).  Leaves unreachable from ``loss`` are left untouched.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    rec = loss._record
    if rec is None:
        raise RecordError("loss was not produced under an active GradRecord")
    if rec.consumed:
        raise RecordError("this GradRecord was already consumed by a backward pass")
    rec.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(rec.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._record is None:
                leaves[key] = inp
    rec.entries.clear()  # entries and outputs form reference cycles; free them now
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    return {key: grads[key] for key in leaves}


@dataclass
class Parameter:
    """A named model weight.  Only trainable parameters take optimizer steps."""

    name: str
    value: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.value.requires_grad = self.trainable

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.value.requires_grad = flag

    def zero_grad(self) -> None:
        self.value.grad = None
