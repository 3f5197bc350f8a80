"""A small tape-based reverse-mode autodiff engine over float64 arrays.

Only the primitives the network needs are provided.  Operations record
themselves on the active :class:`Tape` (if any) when at least one input
requires a gradient; outside a tape everything runs eagerly with no
bookkeeping, which is the inference path.

    with Tape() as tape:
        y = sum_all(relu(linear(x, w, b)))
    tape.backward(y)
    w.grad
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, NonFiniteGradient, ShapeMismatch

LN_EPS = 1e-5

_state = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records primitive applications in execution order."""

    def __init__(self):
        self.nodes: list = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        out.node_id = len(self.nodes)
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor, seed=None):
        """Accumulate d(loss)/d(x) into ``x.grad`` for every recorded input."""
        loss.grad = np.ones_like(loss.data) if seed is None else np.asarray(seed, np.float64)
        for out, inputs, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _finish(out_data, inputs, backward) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NonFiniteError("primitive produced a non-finite value")
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward)
    return out


def _check(cond, msg):
    if not cond:
        raise ShapeMismatch(msg)


def _scatter_rows(values: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """``out[rows[e]] += values[e]`` accumulated strictly in ``e`` order."""
    tail = values.shape[1:]
    width = int(np.prod(tail)) if tail else 1
    if width == 1:
        out = np.bincount(rows, weights=values.reshape(-1), minlength=n)
    else:
        flat = (rows[:, None] * width + np.arange(width)).reshape(-1)
        out = np.bincount(flat, weights=values.reshape(-1), minlength=n * width)
    return out.reshape((n,) + tail)


# ---------------------------------------------------------------------------
# primitives


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``(n, d_in)``."""
    _check(x.data.ndim == 2 and weight.data.ndim == 2, "linear expects 2-d input and weight")
    _check(x.shape[1] == weight.shape[0], f"linear: {x.shape} @ {weight.shape}")
    _check(bias.shape == (weight.shape[1],), f"linear: bias {bias.shape} vs {weight.shape}")
    xd, wd = x.data, weight.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _finish(xd @ wd + bias.data, (x, weight, bias), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"add: {a.shape} vs {b.shape}")
    return _finish(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"sub: {a.shape} vs {b.shape}")
    return _finish(a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"multiply: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _finish(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    _check(len(tensors) > 0, "concat of nothing")
    datas = [t.data for t in tensors]
    ax = axis % datas[0].ndim
    try:
        out = np.concatenate(datas, axis=ax)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    cuts = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _finish(out, tensors, backward)


def gather(x: Tensor, rows) -> Tensor:
    """Select rows (with repetition) along axis 0."""
    rows = np.asarray(rows, dtype=np.int64)
    n = x.shape[0]
    _check(rows.size == 0 or (rows.min() >= 0 and rows.max() < n), "gather index out of range")
    shape = x.shape

    def backward(g):
        return (_scatter_rows(g, rows, shape[0]),)

    return _finish(x.data[rows], (x,), backward)


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner product of two ``(E, d)`` tensors -> ``(E,)``."""
    _check(a.shape == b.shape and a.data.ndim == 2, f"rowdot: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _finish(np.einsum("ij,ij->i", ad, bd), (a, b), lambda g: (g[:, None] * bd, g[:, None] * ad))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``e`` of ``x`` (``(E, d)``) by scalar ``w[e]``."""
    _check(x.data.ndim == 2 and w.shape == (x.shape[0],), f"scale_rows: {x.shape} by {w.shape}")
    xd, wd = x.data, w.data
    return _finish(xd * wd[:, None], (x, w), lambda g: (g * wd[:, None], np.einsum("ij,ij->i", g, xd)))


def segment_sum(values: Tensor, segment_of, n_segments: int) -> Tensor:
    """Sum the rows of ``values`` into ``n_segments`` buckets.

    Accumulation runs sequentially in edge order, so results are
    reproducible bit for bit.  Empty segments give zero rows.
    """
    seg = np.asarray(segment_of, dtype=np.int64)
    _check(seg.shape == (values.shape[0],), "segment_sum: one segment id per row required")
    out = _scatter_rows(values.data, seg, n_segments)
    return _finish(out, (values,), lambda g: (g[seg],))


def segment_softmax(logits: Tensor, segment_of, n_segments: int) -> Tensor:
    """Softmax of a flat ``(E,)`` logit vector within each segment."""
    seg = np.asarray(segment_of, dtype=np.int64)
    _check(logits.data.ndim == 1 and seg.shape == logits.shape, "segment_softmax: shape")
    z = logits.data
    if z.size == 0:
        return _finish(z.copy(), (logits,), lambda g: (g,))
    if np.all(seg[1:] >= seg[:-1]):
        starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
        mx = np.zeros(n_segments)
        mx[seg[starts]] = np.maximum.reduceat(z, starts)
    else:
        mx = np.full(n_segments, -np.inf)
        np.maximum.at(mx, seg, z)
    e = np.exp(z - mx[seg])
    den = np.bincount(seg, weights=e, minlength=n_segments)
    p = e / den[seg]

    def backward(g):
        s = np.bincount(seg, weights=g * p, minlength=n_segments)
        return (p * (g - s[seg]),)

    return _finish(p, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise each row over the last axis, then ``* gain + shift``."""
    _check(x.data.ndim == 2, "layer_norm expects (n, d)")
    d = x.shape[1]
    _check(gain.shape == (d,) and shift.shape == (d,), "layer_norm: gain/shift shape")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _finish(xhat * gd + shift.data, (x, gain, shift), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of an ``(n, C)`` tensor."""
    xd = x.data
    z = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _finish(out, (x,), backward)


def pick_mean(x: Tensor, cols) -> Tensor:
    """``mean_i x[i, cols[i]]`` as a scalar tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    n = x.shape[0]
    _check(cols.shape == (n,), "pick_mean: one column per row")
    if n == 0:
        return _finish(np.zeros(()), (x,), lambda g: (np.zeros(x.shape),))
    rows = np.arange(n)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, cols] = g / n
        return (out,)

    return _finish(np.asarray(x.data[rows, cols].sum() / n), (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    return scale(pick_mean(log_softmax(logits), targets), -1.0)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _finish(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g),))


def affine_combine(a: Tensor, b: Tensor, wa: float, wb: float) -> Tensor:
    """``wa * a + wb * b`` for scalars or equal-shaped tensors."""
    _check(a.shape == b.shape, f"affine_combine: {a.shape} vs {b.shape}")
    wa, wb = float(wa), float(wb)
    return _finish(wa * a.data + wb * b.data, (a, b), lambda g: (g * wa, g * wb))


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(function: Callable[..., Tensor], inputs: Sequence[Tensor], epsilon: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``function(*inputs)`` must return a scalar tensor built from recorded
    primitives.  Error per entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = function(*inputs)
    if out.data.size != 1:
        raise ShapeMismatch("grad_check needs a scalar-valued function")
    tape.backward(out)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        if not np.isfinite(analytic).all():
            raise NonFiniteGradient("analytic gradient is not finite")
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(function(*inputs).data)
            flat[i] = orig - epsilon
            fm = float(function(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            a = float(analytic.reshape(-1)[i])
            if not math.isfinite(num):
                raise NonFiniteGradient("finite-difference gradient is not finite")
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst
