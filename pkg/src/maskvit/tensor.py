"""Dense float tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array (float32 or float64) and an
optional gradient. Operations executed while a ``Tape`` is active are
recorded on it; ``backward(loss, tape)`` replays the tape in reverse and
populates ``.grad`` on every participating tensor. Without an active tape
all operations run grad-free, which is how inference paths are evaluated.

Gradient closures capture the input *arrays*, never the tensors, so
optimizers must replace ``param.data`` with a fresh array rather than
mutating it in place.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

from .errors import DomainError, NumericError, ShapeError, TapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tape:
    """Ordered record of the primitive operations of one forward pass.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order, which is a
    topological order by construction. A tape can be consumed by
    ``backward`` exactly once.
    """

    def __init__(self):
        self._ops = []           # (out, inputs, grad_fn) in execution order
        self._output_ids = set()
        self._used = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._ops)

    @property
    def consumed(self):
        return self._used


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Immutable-by-convention dense array with optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def assert_finite(self, context=""):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values encountered{': ' + context if context else ''}")
        return self

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- operators -------------------------------------------------------

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- shape / reduction methods ---------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(value, like=None):
    """Coerce a scalar/array into a constant Tensor, matching dtype of `like`."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(value), requires_grad=False, dtype=dtype)


def _record(out, inputs, grad_fn):
    """Register op output on the active tape if any input participates."""
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._ops.append((out, inputs, grad_fn))
        tape._output_ids.add(id(out))
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


@contextmanager
def frozen(tensors):
    """Temporarily exclude `tensors` from gradient recording."""
    tensors = list(tensors)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    out = Tensor(a.data + b.data)
    na, nb = a.requires_grad, b.requires_grad
    ash, bsh = a.data.shape, b.data.shape

    def grad_fn(g):
        return (_unbroadcast(g, ash) if na else None,
                _unbroadcast(g, bsh) if nb else None)

    return _record(out, (a, b), grad_fn)


def sub(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    out = Tensor(a.data - b.data)
    na, nb = a.requires_grad, b.requires_grad
    ash, bsh = a.data.shape, b.data.shape

    def grad_fn(g):
        return (_unbroadcast(g, ash) if na else None,
                _unbroadcast(-g, bsh) if nb else None)

    return _record(out, (a, b), grad_fn)


def mul(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    out = Tensor(a.data * b.data)
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (_unbroadcast(g * bd, ad.shape) if na else None,
                _unbroadcast(g * ad, bd.shape) if nb else None)

    return _record(out, (a, b), grad_fn)


def div(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    out = Tensor(a.data / b.data)
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g / bd, ad.shape) if na else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if nb else None
        return ga, gb

    return _record(out, (a, b), grad_fn)


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    out = Tensor(a.data ** p)
    ad = a.data

    def grad_fn(g):
        return (g * p * ad ** (p - 1.0),)

    return _record(out, (a,), grad_fn)


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * od,))


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g / (2.0 * od),))


def tanh(a):
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * (1.0 - od * od),))


def sigmoid(a):
    a = as_tensor(a)
    out = Tensor(expit(a.data))
    od = out.data
    return _record(out, (a,), lambda g: (g * od * (1.0 - od),))


def gelu(a):
    """Exact (erf-based) Gaussian error linear unit."""
    a = as_tensor(a)
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    out = Tensor(ad * cdf)

    def grad_fn(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT2PI
        return (g * (cdf + ad * pdf),)

    return _record(out, (a,), grad_fn)


def absolute(a):
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    ad = a.data
    return _record(out, (a,), lambda g: (g * np.sign(ad),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape) if na else None
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape) if nb else None
        return ga, gb

    return _record(out, (a, b), grad_fn)


def linear(x, w, b):
    """Affine map over the last axis: x @ w + b, as one taped operation."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim < 2 or w.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear shapes incompatible: {x.data.shape} @ {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"bias shape {b.data.shape} does not match output width {w.data.shape[1]}")
    out = Tensor(x.data @ w.data + b.data)
    nx, nw, nb = x.requires_grad, w.requires_grad, b.requires_grad
    xd, wd = x.data, w.data

    def grad_fn(g):
        gx = g @ wd.T if nx else None
        lead = tuple(range(xd.ndim - 1))
        gw = np.tensordot(xd, g, axes=(lead, lead)) if nw else None
        gb = g.sum(axis=lead) if nb else None
        return gx, gw, gb

    return _record(out, (x, w, b), grad_fn)


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    ash = a.data.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ash).copy(),)

    return _record(out, (a,), grad_fn)


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(np.mean(a.data, axis=axis, keepdims=keepdims))
    ash = a.data.shape
    count = a.data.size if axis is None else np.prod(
        [ash[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ash) / count,)

    return _record(out, (a,), grad_fn)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    ash = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(ash),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    ash = a.data.shape
    return _record(out, (a,), lambda g: (_unbroadcast(g, ash),))


def getitem(a, index):
    """Basic (non-repeating) indexing: ints, slices, tuples, Ellipsis."""
    a = as_tensor(a)
    out = Tensor(a.data[index])
    ash = a.data.shape

    def grad_fn(g):
        full = np.zeros(ash, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record(out, (a,), grad_fn)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    needs = [t.requires_grad for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(p if n else None for p, n in zip(pieces, needs))

    return _record(out, tuple(tensors), grad_fn)


# ---------------------------------------------------------------------------
# composite operations
# ---------------------------------------------------------------------------

def softmax(x, axis=-1):
    """Exponential normalization along `axis`, stabilized by max-subtraction."""
    x = as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("softmax of an empty tensor")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def grad_fn(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _record(out, (x,), grad_fn)


def variance(x, axis=None):
    """Unbiased sample variance (divides by count - 1)."""
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]
    if count < 2:
        raise DomainError(f"variance requires at least 2 elements, got {count}")
    centered = sub(x, tensor_mean(x, axis=axis, keepdims=True))
    return div(tensor_sum(mul(centered, centered), axis=axis), float(count - 1))


def cross_entropy(logits, labels):
    """Negative log-likelihood of `labels` under softmax of `logits`.

    Accepts a single logit vector with an integer label, or a [batch, K]
    matrix with a label per row (mean reduction). Computed via
    log-sum-exp for stability.
    """
    logits = as_tensor(logits)
    if logits.ndim == 1:
        k = logits.data.shape[0]
        label = int(labels)
        if not 0 <= label < k:
            raise IndexError(f"label {label} out of range for {k} classes")
        onehot = np.zeros(k, dtype=logits.dtype)
        onehot[label] = 1.0
    elif logits.ndim == 2:
        n, k = logits.data.shape
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
        if labels.min() < 0 or labels.max() >= k:
            raise IndexError("label out of range")
        onehot = np.zeros((n, k), dtype=logits.dtype)
        onehot[np.arange(n), labels] = 1.0
    else:
        raise ShapeError(f"cross_entropy expects 1-d or 2-d logits, got {logits.data.shape}")

    shift = np.max(logits.data, axis=-1, keepdims=True)
    shifted = sub(logits, Tensor(shift, dtype=logits.dtype))
    lse = log(tensor_sum(exp(shifted), axis=-1))
    picked = tensor_sum(mul(shifted, Tensor(onehot)), axis=-1)
    per_sample = sub(lse, picked)
    if logits.ndim == 1:
        return per_sample
    return tensor_mean(per_sample)


def layer_norm(x, gain, bias, eps=1e-5):
    """Standardize over the last dimension, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_sigma
    out = Tensor(normed * gain.data + bias.data)
    nx, ng, nb = x.requires_grad, gain.requires_grad, bias.requires_grad
    gd = gain.data

    def grad_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        gx = None
        if nx:
            dy = g * gd
            gx = inv_sigma * (dy - dy.mean(axis=-1, keepdims=True)
                              - normed * np.mean(dy * normed, axis=-1, keepdims=True))
        gg = np.sum(g * normed, axis=reduce_axes) if ng else None
        gb = np.sum(g, axis=reduce_axes) if nb else None
        return gx, gg, gb

    return _record(out, (x, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss, tape):
    """Populate ``.grad`` for every participating tensor reachable from `loss`.

    The tape is consumed: a second call raises ``TapeError``, as does running
    a later backward into parameters whose gradients were never reset.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if tape._used:
        raise TapeError("tape already consumed by a previous backward")
    if id(loss) not in tape._output_ids:
        raise TapeError("loss was not produced on this tape")
    tape._used = True

    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    leaves = {}

    for out, inputs, grad_fn in reversed(tape._ops):
        g_out = grads.pop(id(out), None)
        if g_out is None:
            continue
        if out.grad is not None:
            raise TapeError("gradient already populated; reset gradients before calling backward")
        out.grad = g_out
        for t, g in zip(inputs, grad_fn(g_out)):
            if g is None:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + g
            else:
                grads[tid] = g
                holders[tid] = t
            if tid not in tape._output_ids:
                leaves[tid] = t

    for tid, t in leaves.items():
        if not t.requires_grad:
            grads.pop(tid, None)
            continue
        if t.grad is not None:
            raise TapeError("gradient already populated; reset gradients before calling backward")
        g = grads.pop(tid)
        if g.dtype != t.data.dtype:
            g = g.astype(t.data.dtype)
        t.grad = g


def zero_grad(tensors):
    for t in tensors:
        t.grad = None
