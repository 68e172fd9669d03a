"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every differentiable op records a node on the module-global tape when
gradients are enabled and at least one input requires them.  backward()
replays the tape in exact reverse execution order, accumulates each
tensor's contributions internally, flushes into .grad exactly once per
tensor per call, and clears the tape.  Calling backward again on a fresh
graph therefore accumulates into .grad; use zero_grad() between steps.

All op outputs are checked for NaN/Inf on the way out (forward) and on
the way back (per-node gradients); either raises NumericError naming
the op instead of propagating silently.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NumericError, ShapeError


class Tape:
    """Ordered record of the differentiable ops of one forward graph."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


TAPE = Tape()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; tensors built inside never require grad."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad = None

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
    def grad(self):
        """Gradient accumulator; lazily allocated zeros on first access."""
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Arithmetic operators (scalars and arrays promote to constants).
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # Method forms of the free-function ops.
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def sqrt(self):
        return sqrt(self)

    def clamp_min(self, floor: float):
        return clamp_min(self, floor)

    def softmax(self, axis: int):
        return softmax(self, axis)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def narrow(self, axis: int, start: int, length: int):
        return narrow(self, axis, start, length)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, data, inputs, backward) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite values in forward output")
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        TAPE.nodes.append(_Node(op, out, inputs, backward))
    return out


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from exc


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axes(axis, ndim: int, op: str) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    axes = []
    for ax in axis:
        ax = int(ax)
        if not -ndim <= ax < ndim:
            raise ShapeError(f"{op}: axis {ax} out of range for ndim {ndim}")
        axes.append(ax % ndim)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"{op}: repeated axis in {axis}")
    return tuple(sorted(axes))


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast("add", a.data, b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _finish("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast("sub", a.data, b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _finish("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast("mul", a.data, b.data)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape)
        gb = _unbroadcast(g * a.data, b.data.shape)
        return ga, gb

    return _finish("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast("div", a.data, b.data)
    # Denominator magnitudes below the global numeric floor are an error,
    # not a silent blow-up; callers floor degenerate values via clamp_min.
    if np.min(np.abs(b.data)) < 1e-12:
        raise NumericError("div: denominator magnitude below 1e-12")

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _finish("div", a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _coerce(a)

    def backward(g):
        return (-g,)

    return _finish("neg", -a.data, (a,), backward)


def exp(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _finish("exp", out, (a,), backward)


def log(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _finish("log", out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", out, (a,), backward)


def relu(a) -> Tensor:
    a = _coerce(a)
    # Gradient at exactly 0 is 0 (mask is strict).
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _finish("relu", np.maximum(a.data, 0.0), (a,), backward)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _finish("sqrt", out, (a,), backward)


def clamp_min(a, floor: float) -> Tensor:
    a = _coerce(a)
    # Gradient passes only where the input sits strictly above the floor.
    mask = a.data > floor

    def backward(g):
        return (g * mask,)

    return _finish("clamp_min", np.maximum(a.data, floor), (a,), backward)


# ---------------------------------------------------------------------------
# Contractions and normalizations


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading dims.

    1-D operands follow numpy promotion: a leading/trailing singleton is
    added for the product and squeezed from the result.
    """
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul: operands must have ndim >= 1")
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(
            f"matmul: inner dims disagree ({a2.shape[-1]} vs {b2.shape[-2]})"
        )
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(
            f"matmul: batch dims of {ad.shape} and {bd.shape} do not broadcast"
        ) from exc

    def backward(g):
        ge = g
        if ad.ndim == 1 and bd.ndim == 1:
            ge = g.reshape(1, 1)
        elif ad.ndim == 1:
            ge = np.expand_dims(g, -2)
        elif bd.ndim == 1:
            ge = np.expand_dims(g, -1)
        ga = np.matmul(ge, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), ge)
        ga = _unbroadcast(ga, a2.shape).reshape(ad.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(bd.shape)
        return ga, gb

    return _finish("matmul", out, (a, b), backward)


def softmax(a, axis: int) -> Tensor:
    """Max-subtracted softmax along one axis; rows sum to 1."""
    a = _coerce(a)
    (ax,) = _norm_axes(axis, a.data.ndim, "softmax")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=ax, keepdims=True)
        return ((g - dot) * s,)

    return _finish("softmax", s, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axis, a.data.ndim, "sum")
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _finish("sum", out, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axis, a.data.ndim, "mean")
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return _finish("mean", out, (a,), backward)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max over one axis (or all); gradient routes to the first maximum."""
    a = _coerce(a)
    data = a.data
    if axis is None:
        out = data.max()
        flat = int(data.argmax())  # ties resolve to the lowest flat index

        def backward(g):
            gx = np.zeros_like(data)
            gx.flat[flat] = np.asarray(g).reshape(())
            return (gx,)

        return _finish("max", out, (a,), backward)

    (ax,) = _norm_axes(axis, data.ndim, "max")
    out = data.max(axis=ax, keepdims=keepdims)
    idx = np.expand_dims(data.argmax(axis=ax), ax)  # first max per slice

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        gx = np.zeros_like(data)
        np.put_along_axis(gx, idx, g, ax)
        return (gx,)

    return _finish("max", out, (a,), backward)


# ---------------------------------------------------------------------------
# Shape plumbing


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.data.shape} -> {shape}") from exc

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _finish("reshape", out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of ndim {a.data.ndim}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _finish("transpose", np.transpose(a.data, axes), (a,), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _coerce(a)
    (ax,) = _norm_axes(axis, a.data.ndim, "narrow")
    if not (0 <= start and start + length <= a.data.shape[ax] and length >= 1):
        raise ShapeError(
            f"narrow: [{start}, {start + length}) exceeds extent {a.data.shape[ax]}"
        )
    sel = [slice(None)] * a.data.ndim
    sel[ax] = slice(start, start + length)
    sel = tuple(sel)

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[sel] = g
        return (gx,)

    return _finish("narrow", a.data[sel].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# Backward pass


def backward(loss: Tensor) -> None:
    """Populate .grad for every requires_grad ancestor of a scalar loss.

    Contributions are accumulated internally during the reverse sweep and
    flushed with a single += per tensor, so a tensor used several times in
    the graph still receives exactly one update per call.  The tape is
    cleared afterwards; backward on a grad-free loss is a no-op.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    try:
        for node in reversed(TAPE.nodes):
            g = acc.get(id(node.out))
            if g is None:
                continue
            grads = node.backward(g)
            for t, gt in zip(node.inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                if not np.all(np.isfinite(gt)):
                    raise NumericError(f"{node.op}: non-finite gradient in backward")
                slot = acc.get(id(t))
                # Out-of-place accumulation: closure results may be views.
                acc[id(t)] = gt if slot is None else slot + gt
                holders[id(t)] = t
        for tid, g in acc.items():
            t = holders[tid]
            if not t.requires_grad:
                continue
            if t._grad is None:
                t._grad = np.zeros_like(t.data)
            t._grad += g
    finally:
        TAPE.clear()
