"""Minimal reverse-mode differentiation on top of numpy.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  Calling
:func:`backward` on a scalar walks that graph in reverse topological order.
The graph is built fresh by each forward pass and owned by it, so forward
passes over different bags never share state.

Precision is a process-wide setting: single precision for training, double
precision for finite-difference checks (see :func:`precision`).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, InputError, NumericalError, StateError

_DTYPE = np.float32


def get_dtype():
    return _DTYPE


def set_dtype(dtype):
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise InputError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the global floating point precision."""
    previous = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


class Tensor:
    """An n-d array node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    """Wrap an op output; attach the backward closure only if needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    live = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(live)
    out._parents = live
    out._backward = backward if live else None
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss):
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                # interior node: release its gradient once propagated
                node.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def linear(x, weight, bias=None):
    """``x @ weight + bias`` for ``x`` of shape [n, d_in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"linear: cannot multiply x{list(x.shape)} by weight{list(weight.shape)}"
        )
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(
                f"linear: bias{list(bias.shape)} does not match weight{list(weight.shape)}"
            )
        out = out + bias.data
        parents.append(bias)

    def _back(g):
        _accumulate(x, g @ weight.data.T)
        _accumulate(weight, x.data.T @ g)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    return _result(out, parents, _back)


def matmul(a, b):
    return linear(a, b)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def _back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), _back)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def _back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), _back)


def scale(x, c):
    """Multiply by a python constant."""
    x = as_tensor(x)
    c = x.data.dtype.type(c)

    def _back(g):
        _accumulate(x, g * c)

    return _result(x.data * c, (x,), _back)


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)

    def _back(g):
        _accumulate(x, g * (1 - y * y))

    return _result(y, (x,), _back)


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype, copy=False)

    def _back(g):
        _accumulate(x, g * y * (1 - y))

    return _result(y, (x,), _back)


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    slope = x.data.dtype.type(slope)
    factor = np.where(x.data > 0, x.data.dtype.type(1), slope)
    y = x.data * factor

    def _back(g):
        _accumulate(x, g * factor)

    return _result(y, (x,), _back)


def activation(x, kind, slope=0.01):
    """Apply ``tanh``, ``sigmoid`` or ``leaky_relu`` by name."""
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise InputError(f"unknown activation {kind!r}")


def softmax_rows(x):
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _back(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), _back)


def log_softmax_rows(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def _back(g):
        p = np.exp(y)
        _accumulate(x, g - p * g.sum(axis=-1, keepdims=True))

    return _result(y, (x,), _back)


def cross_entropy(logits, label):
    """Negative log-likelihood of ``label`` under ``softmax(logits)``.

    ``logits`` has shape [1, C] (or [C]); the result is a scalar tensor.
    """
    logits = as_tensor(logits)
    n_classes = logits.shape[-1]
    if logits.data.size != n_classes:
        raise DimensionError(f"cross_entropy expects [1, C] logits, got {list(logits.shape)}")
    label = int(label)
    if not 0 <= label < n_classes:
        raise InputError(f"label {label} out of range for {n_classes} classes")
    row = logits.data.reshape(-1)
    z = row - row.max()
    lse = np.log(np.exp(z).sum())
    loss = np.asarray(lse - z[label], dtype=row.dtype)
    if not np.isfinite(loss):
        raise NumericalError("cross_entropy produced a non-finite loss")

    def _back(g):
        p = np.exp(z - lse)
        p[label] -= 1
        _accumulate(logits, (g * p).reshape(logits.shape))

    return _result(loss, (logits,), _back)


def sum_axis(x, axis):
    x = as_tensor(x)
    y = x.data.sum(axis=axis)

    def _back(g):
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _result(y, (x,), _back)


def mean_axis(x, axis):
    x = as_tensor(x)
    n = x.shape[axis]
    return scale(sum_axis(x, axis), 1.0 / n)


def max_axis(x, axis):
    """Maximum along ``axis``; the gradient goes to the first maximiser."""
    x = as_tensor(x)
    arg = x.data.argmax(axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def _back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(x, gx)

    return _result(y, (x,), _back)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def _back(g):
        _accumulate(x, g.reshape(old))

    return _result(x.data.reshape(shape), (x,), _back)


def take_rows(x, index):
    """Gather rows of a [n, d] tensor with an integer array of any shape."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    y = x.data[index]

    def _back(g):
        flat = index.reshape(-1)
        # one-hot scatter matrix: much faster than np.add.at for small n
        onehot = np.zeros((x.shape[0], flat.size), dtype=g.dtype)
        onehot[flat, np.arange(flat.size)] = 1
        _accumulate(x, onehot @ g.reshape(-1, x.shape[1]))

    return _result(y, (x,), _back)


def cosine_similarity(a, b, eps=1e-8):
    """Cosine between row ``a[i]`` and each ``b[i, k]``.

    ``a`` is [n, d], ``b`` is [n, k, d]; the result is [n, k].  The
    denominator ``|a||b|`` is clamped below at ``eps``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 3 or b.shape[0] != a.shape[0] or b.shape[2] != a.shape[1]:
        raise DimensionError(
            f"cosine_similarity: a{list(a.shape)} incompatible with b{list(b.shape)}"
        )
    ad, bd = a.data, b.data
    dot = np.einsum("nd,nkd->nk", ad, bd)
    na = np.sqrt((ad * ad).sum(axis=1))
    nb = np.sqrt((bd * bd).sum(axis=2))
    den = na[:, None] * nb
    clamped = den <= eps
    den_c = np.where(clamped, ad.dtype.type(eps), den)
    s = dot / den_c

    def _back(g):
        # unclamped: ds/da = b/den - s a/|a|^2 ; ds/db = a/den - s b/|b|^2
        free = ~clamped
        with np.errstate(divide="ignore", invalid="ignore"):
            ca = np.where(free, s / np.maximum(na[:, None] ** 2, eps * eps), 0)
            cb = np.where(free, s / np.maximum(nb ** 2, eps * eps), 0)
        gd = g / den_c
        if a.requires_grad:
            ga = np.einsum("nk,nkd->nd", gd, bd) - (g * ca).sum(axis=1)[:, None] * ad
            _accumulate(a, ga)
        if b.requires_grad:
            gb = gd[:, :, None] * ad[:, None, :] - (g * cb)[:, :, None] * bd
            _accumulate(b, gb)

    return _result(s, (a, b), _back)


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------


@dataclass
class ParamStore:
    """Named parameter tensors with Adam moment buffers.

    ``frozen`` names are kept in the store (and serialised) but are not
    touched by :func:`adam_step`.
    """

    params: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step_count: int = 0
    frozen: set = field(default_factory=set)

    def add(self, name, value, trainable=True):
        if name in self.params:
            raise StateError(f"parameter {name!r} already registered")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        self.adam_m[name] = np.zeros_like(t.data)
        self.adam_v[name] = np.zeros_like(t.data)
        if not trainable:
            self.frozen.add(name)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self):
        return list(self.params)

    @property
    def grads(self):
        return {name: t.grad for name, t in self.params.items()}

    def trainable(self):
        return [n for n in self.params if n not in self.frozen]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_parameters(self):
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise StateError(f"state mismatch on parameters {sorted(missing)}")
        for name, value in state.items():
            t = self.params[name]
            value = np.asarray(value)
            if value.shape != t.data.shape:
                raise DimensionError(
                    f"{name}: stored shape {list(value.shape)} != {list(t.data.shape)}"
                )
            t.data = value.astype(t.data.dtype, copy=True)

    def astype(self, dtype):
        """Copy with every buffer cast to ``dtype``."""
        dtype = np.dtype(dtype).type
        out = ParamStore(step_count=self.step_count, frozen=set(self.frozen))
        for name, t in self.params.items():
            c = Tensor.__new__(Tensor)
            c.data = t.data.astype(dtype)
            c.grad = None
            c.requires_grad = True
            c._parents = ()
            c._backward = None
            c.name = name
            out.params[name] = c
            out.adam_m[name] = self.adam_m[name].astype(dtype)
            out.adam_v[name] = self.adam_v[name].astype(dtype)
        return out


def adam_step(store, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction over every trainable parameter.

    Weight decay is folded into the gradient (``grad + weight_decay * param``)
    before the moment update.  Gradients are cleared afterwards.
    """
    names = store.trainable()
    for name in names:
        if store.params[name].grad is None:
            raise StateError(f"no gradient for parameter {name!r}")
    store.step_count += 1
    t = store.step_count
    bc1 = 1 - beta1 ** t
    bc2 = 1 - beta2 ** t
    for name in names:
        p = store.params[name]
        dt = p.data.dtype.type
        g = p.grad
        if weight_decay:
            g = g + dt(weight_decay) * p.data
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        p.data = p.data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
        if not np.all(np.isfinite(p.data)):
            raise NumericalError(f"parameter {name!r} became non-finite")
    store.zero_grad()
    return store


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def rows(self):
        return [(name, err, err <= self.tolerance) for name, err in self.errors.items()]


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - f| / max(|a|, |f|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / den


def grad_check(loss_fn, store, epsilon=1e-5, tolerance=1e-4, names=None):
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` takes no arguments and must build its graph from the current
    contents of ``store``.  Only meaningful in double precision.
    """
    if get_dtype() is not np.float64:
        raise StateError("grad_check requires double precision; wrap in precision('float64')")
    names = list(store.params) if names is None else list(names)
    store.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericalError("loss is not finite at the check point")
    backward(loss)
    analytic = {n: (store[n].grad if store[n].grad is not None else np.zeros_like(store[n].data))
                for n in names}
    store.zero_grad()

    def _value():
        v = float(loss_fn().data)
        if not math.isfinite(v):
            raise NumericalError("loss became non-finite under perturbation")
        return v

    errors = {}
    for name in names:
        p = store[name]
        flat = p.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = _value()
            flat[i] = orig - epsilon
            down = _value()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * epsilon)
        err = relative_error(analytic[name].reshape(-1), numeric)
        errors[name] = float(err.max()) if err.size else 0.0
    store.zero_grad()
    return GradCheckReport(errors=errors, tolerance=tolerance)
