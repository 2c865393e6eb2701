"""Reverse-mode automatic differentiation over dense numpy arrays.

A forward pass executed inside a ``Tape`` context records every primitive
(matmul, elementwise arithmetic, reductions, reshapes, ...) in execution
order, which is topological by construction.  ``Tape.backward`` then walks
the record once, in reverse, accumulating vector-Jacobian products into the
leaves.  Tensors are thin immutable wrappers around ndarrays; ops executed
with no active tape (or under ``no_grad``) run the exact same numpy code
without recording, so values are bit-identical either way.

float32 is the working precision for training; gradient-check tests build
everything in float64.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DIV_EPS = 1e-12  # denominator magnitudes are clamped here, forward and backward


class ShapeError(ValueError):
    """Operand shapes invalid for a primitive."""


class GraphReuseError(RuntimeError):
    """A tape was asked to run backward twice."""


class UnsafeInstanceError(RuntimeError):
    """Finite differences would straddle a kink (relu/max/... too close to its
    switching point); the caller should resample the instance."""


class Tensor:
    """Immutable dense tensor. All dimensions must be >= 1."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if any(s == 0 for s in arr.shape):
            raise ShapeError(f"tensor: zero-sized dimension in shape {arr.shape}")
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

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


class _Node:
    __slots__ = ("op", "out", "inputs", "vjp", "margin")

    def __init__(self, op, out, inputs, vjp, margin):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.margin = margin


# Active tape stack; a None entry (pushed by no_grad) disables recording.
_TAPES: list = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Records a forward pass; single-owner, consumed by one backward call.

    ``track_margins=True`` additionally records, per kinked primitive, how far
    the forward pass was from its nearest non-smooth point. Gradient checks
    use this to reject instances where finite differences are invalid.
    """

    def __init__(self, track_margins: bool = False):
        self.nodes: list[_Node] = []
        self.consumed = False
        self.track_margins = track_margins

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def min_margin(self) -> float:
        return min((n.margin for n in self.nodes), default=math.inf)

    def backward(self, output: Tensor, seed=None) -> "Gradients":
        if self.consumed:
            raise GraphReuseError("compute graph already consumed by a backward pass")
        self.consumed = True
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=output.data.dtype)
            if seed.shape != output.data.shape:
                raise ShapeError(
                    f"backward: seed shape {seed.shape} does not match output {output.data.shape}"
                )
        grads: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
        return Gradients(grads)


class Gradients:
    """Leaf-tensor -> gradient mapping returned by ``Tape.backward``."""

    __slots__ = ("_by_id",)

    def __init__(self, by_id):
        self._by_id = by_id

    def get(self, t: Tensor):
        return self._by_id.get(id(t))

    def wrt(self, t: Tensor) -> np.ndarray:
        g = self._by_id.get(id(t))
        return g if g is not None else np.zeros_like(t.data)


class no_grad:
    """Context manager disabling recording on any enclosing tape."""

    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _record(op, out, inputs, vjp, margin=math.inf):
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None:
        tape.nodes.append(_Node(op, out, inputs, vjp, margin))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_forward(op, a, b, fn):
    try:
        return fn(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{op}: operands {a.data.shape} and {b.data.shape}: {e}") from None


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = Tensor(_binary_forward("add", a, b, np.add))
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = Tensor(_binary_forward("sub", a, b, np.subtract))
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _record("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = Tensor(_binary_forward("mul", a, b, np.multiply))
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", out, (a, b), vjp)


def div(a, b) -> Tensor:
    """a / b with |denominator| clamped to DIV_EPS, consistently in backward
    (the clamp is flat, so d/db is zero wherever it engaged)."""
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    bd = b.data
    small = np.abs(bd) < DIV_EPS
    denom = np.where(small, np.copysign(np.asarray(DIV_EPS, dtype=bd.dtype), bd), bd)
    out = Tensor(_binary_forward("div", a, Tensor(denom), np.divide))
    ad = a.data
    live = ~small

    def vjp(g):
        ga = _unbroadcast(g / denom, ad.shape)
        gb = _unbroadcast(np.where(live, -g * ad / (denom * denom), 0.0), bd.shape)
        return ga, gb

    tape = _TAPES[-1] if _TAPES else None
    margin = float(np.min(np.abs(bd))) if (tape and tape.track_margins) else math.inf
    return _record("div", out, (a, b), vjp, margin)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record("neg", out, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
    else:
        raise ShapeError(f"matmul: ranks must be 2x2 or 3x3, got {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)

    if ad.ndim == 2:

        def vjp(g):
            return g @ bd.T, ad.T @ g

    else:

        def vjp(g):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _record("matmul", out, (a, b), vjp)


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = Tensor(np.maximum(ad, 0))
    mask = ad > 0

    def vjp(g):
        return (g * mask,)

    tape = _TAPES[-1] if _TAPES else None
    margin = float(np.min(np.abs(ad))) if (tape and tape.track_margins) else math.inf
    return _record("relu", out, (a,), vjp, margin)


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    s = np.empty_like(ad)
    pos = ad >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _record("sigmoid", out, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _record("tanh", out, (a,), vjp)


def square(a: Tensor) -> Tensor:
    ad = a.data
    out = Tensor(ad * ad)

    def vjp(g):
        return (2.0 * ad * g,)

    return _record("square", out, (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)

    def vjp(g):
        # guard avoids 0*inf -> nan when the sqrt branch is masked out downstream
        return (g / (2.0 * np.maximum(y, 1e-20)),)

    tape = _TAPES[-1] if _TAPES else None
    margin = float(np.min(a.data)) if (tape and tape.track_margins) else math.inf
    return _record("sqrt", out, (a,), vjp, margin)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as e:
        raise ShapeError(f"concat: {[t.data.shape for t in tensors]}: {e}") from None
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tensors, vjp)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def vjp(g):
        return (g.reshape(orig),)

    return _record("reshape", out, (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _record("transpose", out, (a,), vjp)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing; backward scatters into zeros."""
    out = Tensor(a.data[key].copy())
    shape = a.data.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[key] = g
        return (z,)

    return _record("slice", out, (a,), vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of the first axis by integer index (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])
    shape = a.data.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _record("gather_rows", out, (a,), vjp)


def where_(cond, a, b, margin: float | None = None) -> Tensor:
    """Elementwise select by a constant boolean mask.

    The mask is data, not a differentiable input; gradients flow to each
    branch only where it was taken. ``margin`` lets the caller report how far
    the forward pass was from flipping the mask.
    """
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    cond = np.asarray(cond, dtype=bool)
    out = Tensor(_binary_forward("where", a, b, lambda x, y: np.where(cond, x, y)))
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(np.where(cond, g, 0.0), ash), _unbroadcast(np.where(cond, 0.0, g), bsh)

    tape = _TAPES[-1] if _TAPES else None
    m = margin if (margin is not None and tape and tape.track_margins) else math.inf
    return _record("where", out, (a, b), vjp, m)


def _restore_axis(g, axis, shape, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def vjp(g):
        return (_restore_axis(g, axis, shape, keepdims).copy(),)

    return _record("reduce_sum", out, (a,), vjp)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]
    # sum-then-divide keeps the mean bit-compatible with an explicit sum/N
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims) / n)

    def vjp(g):
        return (_restore_axis(g / n, axis, shape, keepdims).copy(),)

    return _record("reduce_mean", out, (a,), vjp)


def _extremum(name, select, argselect, a, axis, keepdims):
    ad = a.data
    shape = ad.shape
    tape = _TAPES[-1] if _TAPES else None
    track = bool(tape and tape.track_margins)
    if axis is None:
        flat = ad.reshape(-1)
        idx = int(argselect(flat))  # ties resolve to the lowest index
        val = flat[idx]
        out = Tensor(np.asarray(val))

        def vjp(g):
            z = np.zeros(shape, dtype=ad.dtype)
            z.reshape(-1)[idx] = g
            return (z,)

        margin = math.inf
        if track and flat.size > 1:
            rest = np.delete(flat, idx)
            margin = float(np.min(np.abs(val - rest)))
        return _record(name, out, (a,), vjp, margin)

    idx = argselect(ad, axis=axis)
    val = np.take_along_axis(ad, np.expand_dims(idx, axis), axis=axis)
    out = Tensor(val.squeeze(axis) if not keepdims else val)

    def vjp(g):
        z = np.zeros(shape, dtype=ad.dtype)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(z, np.expand_dims(idx, axis), gg, axis=axis)
        return (z,)

    margin = math.inf
    if track and shape[axis] > 1:
        k = -2 if select is np.max else 1
        part = np.partition(ad, k, axis=axis)
        second = np.take(part, -2 if select is np.max else 1, axis=axis)
        margin = float(np.min(np.abs(val.squeeze(axis) - second)))
    return _record(name, out, (a,), vjp, margin)


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum reduction; gradient routes only to the recorded argmax
    positions, with ties broken toward the lowest index."""
    return _extremum("reduce_max", np.max, np.argmax, a, axis, keepdims)


def reduce_min(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extremum("reduce_min", np.min, np.argmin, a, axis, keepdims)


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second-moment accumulators plus step counter for a fixed
    parameter list (order matters and must stay stable)."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], grads, state: AdamState):
    """One bias-corrected Adam update. ``grads`` is a Gradients object or a
    list of ndarrays aligned with ``params``. Parameters get fresh arrays
    (previously shared .data buffers are left untouched)."""
    if isinstance(grads, Gradients):
        grads = [grads.wrt(p) for p in params]
    if len(grads) != len(params):
        raise ShapeError(f"adam_step: {len(grads)} gradients for {len(params)} parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Gradient checking


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    margin: float = 2e-2,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of the scalar ``fn(*inputs)``.

    Inputs are copied to float64. Raises UnsafeInstanceError when the forward
    pass came within ``margin`` of a kink, in which case finite differences
    are not a valid oracle and the caller should draw a fresh instance.
    ``sample`` limits the check to that many coordinates per input tensor.
    """
    inputs = [Tensor(np.array(t.data, dtype=np.float64)) for t in inputs]
    with Tape(track_margins=True) as tape:
        out = fn(*inputs)
    if out.size != 1:
        raise ShapeError(f"gradcheck: fn must return a scalar, got shape {out.shape}")
    if tape.min_margin() < margin:
        raise UnsafeInstanceError(f"kink margin {tape.min_margin():.2e} < {margin:.0e}")
    grads = tape.backward(out)

    worst = 0.0
    for t in inputs:
        analytic = grads.wrt(t)
        if sample is not None and t.size > sample:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(t.size, size=sample, replace=False)
        else:
            coords = range(t.size)
        flat = t.data.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f_plus = fn(*inputs).item()
            flat[i] = orig - h
            with no_grad():
                f_minus = fn(*inputs).item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst
