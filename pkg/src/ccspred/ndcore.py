"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active on the
current thread and at least one input requires a gradient, so inference
code runs the same functions without bookkeeping::

    with Tape() as tape:
        loss = mse_loss(model(x), y)
    tape.backward(loss)      # fills Parameter.grad
    opt.step()
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np

from .errors import DimensionError, NonFiniteError, OutOfVocabularyError

__all__ = [
    "Tensor", "Parameter", "Tape", "Adam",
    "add", "sub", "mul", "matmul", "linear", "reshape", "transpose", "concat",
    "mean", "layer_norm", "gelu", "relu", "embedding_lookup", "softmax_rows",
    "mse_loss", "kaiming_uniform", "uniform",
]

_local = threading.local()
_param_ids = itertools.count()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf. ``data`` is updated in place by the optimizer."""

    __slots__ = ("grad", "id", "name")

    def __init__(self, data, name=""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.id = next(_param_ids)
        self.name = name

    @property
    def value(self):
        return self.data

    def zero_grad(self):
        self.grad[...] = 0.0


class Tape:
    """Records differentiable operations in execution order."""

    def __init__(self):
        self.nodes = []
        self.visits = 0

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out, inputs, backward):
        self.nodes.append((out, inputs, backward))

    def backward(self, loss):
        """Accumulate d(loss)/d(param) into every reachable Parameter.grad."""
        if not loss.requires_grad:
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            self.visits += 1
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if isinstance(t, Parameter):
                    t.grad += gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced (shape {data.shape})")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), backward)


def relu(x):
    mask = x.data > 0.0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x):
    """Tanh-approximated GELU."""
    v = x.data
    t = v * v
    t *= _GELU_K
    t += 1.0
    t *= v
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= v
    y *= 0.5

    def backward(g):
        dt = v * v
        dt *= 3.0 * _GELU_K
        dt += 1.0
        dt *= (1.0 - t * t)
        dt *= _GELU_C * 0.5
        dt *= v
        dt += 0.5 * (1.0 + t)
        dt *= g
        return (dt,)

    return _result(y, (x,), backward)


# -- shape ------------------------------------------------------------------

def reshape(x, shape):
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x, axes):
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _result(x.data.transpose(axes), (x,), backward)


def concat(tensors, axis=-1):
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def mean(x, axis):
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _result(x.data.mean(axis=axis), (x,), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored as [out, in]; leading axes are flattened."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: {x.shape} x {weight.shape}ᵀ")
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data.T
    if bias is not None:
        y += bias.data
    out_shape = x.shape[:-1] + (weight.shape[0],)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(y.reshape(out_shape), inputs, backward)


# -- normalisation / activations over the last axis -------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis to zero mean, unit (population) variance."""
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty dimension")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        gx = None
        if x.requires_grad:
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def softmax_rows(x):
    """Max-subtracted softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward)


def embedding_lookup(table, indices):
    idx = np.asarray(indices, dtype=np.int64)
    k = table.shape[0]
    bad = (idx < 0) | (idx >= k)
    if bad.any():
        raise OutOfVocabularyError(int(idx[bad][0]))

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), backward)


def mse_loss(pred, target):
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    m = pred.shape[0] if pred.ndim else 1
    if pred.data.size == 0:
        raise DimensionError("mse_loss on an empty batch")
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target

    def backward(g):
        return (g * 2.0 * diff / m,)

    return _result(np.asarray(np.mean(diff * diff)), (pred,), backward)


# -- initialisation ---------------------------------------------------------

def kaiming_uniform(shape, rng):
    """U(-b, b) with b = sqrt(6 / fan_in); ``shape`` is (fan_out, fan_in)."""
    fan_in = shape[-1]
    if fan_in < 1:
        raise DimensionError("kaiming_uniform needs fan_in >= 1")
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def uniform(shape, lo, hi, rng):
    if not lo < hi:
        raise ValueError(f"empty range [{lo}, {hi}]")
    return rng.uniform(lo, hi, size=shape)


class Adam:
    """Adam with bias correction; moments are keyed by ``Parameter.id``."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            m = self.m.get(p.id)
            if m is None:
                m = self.m[p.id] = np.zeros_like(p.data)
                self.v[p.id] = np.zeros_like(p.data)
            v = self.v[p.id]
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
