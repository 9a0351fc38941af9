"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient.  Outside a tape every op is a plain numpy
computation, which is how inference and pseudo-label branches run.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * 3.0).sum()
    >>> tape.backward(loss)[w]
    array([[3., 3.],
           [3., 3.]])

Broadcasting is deliberately limited to tensor/scalar pairs.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, NumericError, UsageError

BCE_EPS = 1e-7
LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

_TAPES: list["Tape"] = []


class Tensor:
    """A float64 array plus a flag saying whether gradients are wanted."""

    __array_priority__ = 1000  # make numpy defer to our reflected operators
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
            raise ConfigurationError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)


class Tape:
    """Ordered record of primitive applications, replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss, wrt=None):
        """Gradients of a scalar ``loss`` with respect to every recorded tensor.

        Returns a dict keyed by tensor.  Tensors in ``wrt`` that the loss does
        not depend on are present with zero gradients.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise UsageError("backward needs a scalar loss tensor")
        grads = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.data)
        owners = {id(loss): loss}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                owners[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = {owners[k]: v for k, v in grads.items()}
        for t in wrt or ():
            if t not in result:
                result[t] = np.zeros_like(t.data)
        return result


def forward(fn, *inputs):
    """Run ``fn(*inputs)`` on a fresh tape; returns ``(output, tape)``."""
    with Tape() as tape:
        out = fn(*inputs)
    return out, tape


def backward(tape, loss, wrt=None):
    return tape.backward(loss, wrt)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(name, data, inputs, fn):
    if not np.isfinite(data).all():
        raise NumericError(name)
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append((out, inputs, fn))
    return out


def _check_pair(name, a, b):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ConfigurationError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


# elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def neg(x):
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def relu(x):
    mask = x.data > 0
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    y = expit(x.data)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x):
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _make("log", y, (x,), lambda g: (g / x.data,))


def sin(x):
    return _make("sin", np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x):
    return _make("cos", np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def clamp(x, lo, hi):
    """Clip values; the gradient is zero where clipping is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _make("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# shape ----------------------------------------------------------------------

def tsum(x, axis=None):
    if axis is None:
        return _make("sum", np.asarray(x.data.sum()), (x,),
                     lambda g: (np.broadcast_to(g, x.shape).copy(),))
    y = x.data.sum(axis=axis)
    return _make("sum", y, (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def mean(x):
    n = x.size
    return _make("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(x.shape, g / n),))


def reshape(x, shape):
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ConfigurationError(f"concat: {exc}") from None
    return _make("concat", data, tuple(tensors), fn)


def channels(x, start, stop):
    """Slice ``x[:, start:stop]``."""

    def fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make("channels", x.data[:, start:stop], (x,), fn)


def gather_pixels(x, rows, cols):
    """Pick one pixel per batch item: ``(N, C, H, W) -> (N, C, 1, 1)``."""
    n = np.arange(x.shape[0])
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def fn(g):
        full = np.zeros_like(x.data)
        full[n, :, rows, cols] = g[:, :, 0, 0]
        return (full,)

    return _make("gather_pixels", x.data[n, :, rows, cols][:, :, None, None], (x,), fn)


# convolution ----------------------------------------------------------------

def _conv1x1(x, w, b):
    n, c, h, wd = x.shape
    o = w.shape[0]
    wm = w.data.reshape(o, c)
    xf = x.data.reshape(n, c, h * wd)
    y = wm @ xf
    if b is not None:
        y += b.data[:, None]

    def fn(g):
        gf = g.reshape(n, o, h * wd)
        gw = np.einsum("noh,nch->oc", gf, xf).reshape(w.shape)
        gb = gf.sum(axis=(0, 2)) if b is not None else None
        gx = (wm.T @ gf).reshape(x.shape) if x.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", y.reshape(n, o, h, wd), inputs, fn)


def conv2d(x, w, b=None):
    """Zero-padded 'same' convolution, ``x: (N, C, H, W)``, ``w: (O, C, k, k)``, odd k."""
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigurationError("conv2d expects 4-d input and weight")
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel {w.shape} does not fit input {x.shape}")
    if b is not None and b.shape != (o,):
        raise ConfigurationError(f"conv2d: bias shape {b.shape} != ({o},)")
    if k == 1:
        return _conv1x1(x, w, b)
    # Lay the zero-padded batch out as one (C, N*(H+2p)*(W+2p)) matrix.  Each
    # kernel tap is then a plain GEMM against a column-offset view, and the
    # output columns that land in padding are cropped afterwards.
    p = k // 2
    hp, wp = h + 2 * p, wd + 2 * p
    m = n * hp * wp
    xp = np.zeros((c, m + 2 * p * wp + 2 * p))
    xp[:, :m].reshape(c, n, hp, wp)[:, :, p:p + h, p:p + wd] = x.data.transpose(1, 0, 2, 3)
    taps = [(i, j, i * wp + j) for i in range(k) for j in range(k)]
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))   # BLAS wants contiguous taps
    yf = np.zeros((o, m))
    for i, j, off in taps:
        yf += wt[i, j] @ xp[:, off:off + m]
    y = yf.reshape(o, n, hp, wp)[:, :, :h, :wd].transpose(1, 0, 2, 3)
    if b is not None:
        y = y + b.data[:, None, None]
    y = np.ascontiguousarray(y)

    def fn(g):
        gf = np.zeros((o, n, hp, wp))
        gf[:, :, :h, :wd] = g.transpose(1, 0, 2, 3)
        gf = gf.reshape(o, m)
        gw = np.empty(w.shape)
        for i, j, off in taps:
            gw[:, :, i, j] = gf @ xp[:, off:off + m].T
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, j, off in taps:
                gxp[:, off:off + m] += wt[i, j].T @ gf
            gx = gxp[:, :m].reshape(c, n, hp, wp)[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3).copy()
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", y, inputs, fn)


# losses and densities -------------------------------------------------------

def bce_map(pred, target):
    """Per-element binary cross-entropy, no reduction.

    ``pred`` is clamped to ``[1e-7, 1 - 1e-7]`` before the logs.  The backward
    pass evaluates the BCE derivative at the clamped value everywhere, so a
    saturated wrong prediction still receives a corrective gradient.
    """
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if y.shape != pred.shape:
        raise ConfigurationError(f"bce_map: shape mismatch {pred.shape} vs {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise UsageError("bce_map targets must be 0 or 1")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return _make("bce_map", loss, (pred,), lambda g: (g * (p - y) / (p * (1.0 - p)),))


def log1m_tanh_sq(u):
    """Stable ``log(1 - tanh(u)**2)``."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def gaussian_logprob(u, mean, log_std, squash=False):
    """Diagonal Gaussian log-density summed over axis 1.

    ``u`` is the pre-squash sample.  With ``squash`` the density is that of
    ``tanh(u)``, i.e. the change-of-variables term ``-sum log(1 - tanh(u)^2)``
    is added.  ``log_std`` is clamped to ``[-10, 2]``.
    """
    u, mean, log_std = _as_tensor(u), _as_tensor(mean), _as_tensor(log_std)
    if not (u.shape == mean.shape == log_std.shape):
        raise ConfigurationError("gaussian_logprob: shape mismatch")
    ls = np.clip(log_std.data, LOG_STD_MIN, LOG_STD_MAX)
    inside = (log_std.data >= LOG_STD_MIN) & (log_std.data <= LOG_STD_MAX)
    inv_std = np.exp(-ls)
    z = (u.data - mean.data) * inv_std
    elem = -0.5 * z * z - ls - _HALF_LOG_2PI
    if squash:
        elem = elem - log1m_tanh_sq(u.data)

    def fn(g):
        g = np.expand_dims(g, 1)
        gu = -z * inv_std
        if squash:
            gu = gu + 2.0 * np.tanh(u.data)
        return g * gu, g * z * inv_std, g * (z * z - 1.0) * inside

    return _make("gaussian_logprob", elem.sum(axis=1), (u, mean, log_std), fn)
