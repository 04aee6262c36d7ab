"""
Dense float64 tensors with a small set of differentiable operations.

Operations performed while a ComputationTrace is active are recorded on it in
execution order; backward() walks that record in reverse. Outside a trace the
same operations run without building a graph, which is how inference works.
"""
import logging
import threading
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from errors import ContractError, DegenerateRowError, DimensionError, NumericError

logger = logging.getLogger(__name__)

MAX_RANK = 3

_local = threading.local()


def _active_trace():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __array_ufunc__ = None  # ndarray <op> Tensor dispatches to the Tensor operator

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim > MAX_RANK:
            raise DimensionError(f"Tensor rank {self.data.ndim} exceeds {MAX_RANK}")
        self.requires_grad = requires_grad
        self.grad = None

    @classmethod
    def _wrap(cls, array):
        out = cls.__new__(cls)
        out.data = np.asarray(array, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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


class _Record(NamedTuple):
    output: Tensor
    inputs: tuple
    vjp: Callable


class ComputationTrace:
    """Ordered record of the differentiable operations run inside its context."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, output, inputs, vjp):
        self.records.append(_Record(output, tuple(inputs), vjp))


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(array, inputs, vjp):
    out = Tensor._wrap(array)
    trace = _active_trace()
    if trace is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        trace.record(out, inputs, vjp)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- Elementwise arithmetic ---

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data ** 2), b.shape)))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def minimum(a, b):
    take_a = a.data <= b.data
    return _result(np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (g * take_a, g * ~take_a))


def maximum(a, b):
    take_a = a.data >= b.data
    return _result(np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (g * take_a, g * ~take_a))


def clip(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def log(x):
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh approximation; smooth everywhere, which keeps finite-difference checks clean."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du),)

    return _result(y, (x,), vjp)


def smooth_l1(x, beta=1.0):
    small = np.abs(x.data) < beta
    y = np.where(small, 0.5 * x.data ** 2 / beta, np.abs(x.data) - 0.5 * beta)
    return _result(y, (x,), lambda g: (g * np.where(small, x.data / beta, np.sign(x.data)),))


def dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# --- Shape and reduction ---

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x):
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _result(x.data.T, (x,), lambda g: (g.T,))


def reshape(x, shape):
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum(x, axis=None):
    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.sum(x.data, axis=axis), (x,), vjp)


def mean(x, axis=None):
    count = x.size if axis is None else x.shape[axis]
    return div(sum(x, axis=axis), float(count))


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(x, indices, axis=0):
    idx = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (slice(None),) * axis + (idx,), g)
        return (grad,)

    return _result(np.take(x.data, idx, axis=axis), (x,), vjp)


# --- Normalization and attention weights ---

def masked_softmax(scores: Tensor, mask) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if scores.ndim != 2 or mask.shape != scores.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    visible_rows = mask.any(axis=1)
    if not visible_rows.all():
        row = int(np.argmin(visible_rows))
        raise DegenerateRowError(f"softmax row {row} has no visible entries")

    masked = np.where(mask, scores.data, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    y = e / e.sum(axis=1, keepdims=True)
    return _result(y, (scores,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps=1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm shapes x={x.shape} gain={gain.shape} bias={bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std
    y = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(y, (x, gain, bias), vjp)


# --- Reverse accumulation ---

def backward(trace: ComputationTrace, loss: Tensor, accumulate=True):
    """
    Reverse-mode pass over `trace` seeded with d(loss)/d(loss) = 1.
    Returns {leaf tensor: gradient}. With accumulate=True gradients are also
    added into each leaf's .grad.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.output) for r in trace.records}
    if id(loss) not in produced and not loss.requires_grad:
        raise ContractError("loss was not produced by this trace")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {id(loss): loss} if id(loss) not in produced else {}
    for rec in reversed(trace.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            grads[key] = grads[key] + gi if key in grads else np.asarray(gi, dtype=np.float64)

    result = {leaves[k]: g for k, g in grads.items() if k in leaves}
    if accumulate:
        for leaf, g in result.items():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return result


def _scalar_value(t: Tensor) -> float:
    value = float(t.data)
    if not np.isfinite(value):
        raise NumericError(f"objective returned non-finite value {value}")
    return value


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step=1e-5,
                      samples=100, rng: Optional[np.random.Generator] = None) -> float:
    """
    Compares backward() against central differences on up to `samples`
    coordinates drawn uniformly from `params`. Returns the max relative error
    |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
    """
    if step <= 0:
        raise ContractError(f"finite difference step must be positive, got {step}")
    rng = rng if rng is not None else np.random.default_rng(0)

    with ComputationTrace() as trace:
        loss = f()
    _scalar_value(loss)
    analytic = backward(trace, loss, accumulate=False)

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    offsets = np.cumsum(sizes)
    picks = np.sort(rng.choice(total, size=min(samples, total), replace=False))

    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right"))
        p = params[which]
        i = int(flat - (offsets[which] - sizes[which]))
        original = p.data

        shifted = original.copy()
        shifted.flat[i] += step
        p.data = shifted
        f_plus = _scalar_value(f())
        shifted = original.copy()
        shifted.flat[i] -= step
        p.data = shifted
        f_minus = _scalar_value(f())
        p.data = original

        g_fd = (f_plus - f_minus) / (2.0 * step)
        g = analytic.get(p)
        g_a = float(g.flat[i]) if g is not None else 0.0
        err = abs(g_a - g_fd) / max(1e-8, abs(g_a) + abs(g_fd))
        worst = max(worst, err)

    logger.debug(f"Finite-difference check over {len(picks)} coordinates: max rel err {worst:.3e}")
    return worst
