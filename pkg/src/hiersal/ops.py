"""Differentiable primitives.

Every function takes ``Tensor`` operands, computes the forward result with
the selected kernel backend, and registers an exact backward rule on the
active tape. With no tape active (inference), the forward math is all that
runs.
"""

import numpy as np

from . import kernels
from .errors import ShapeError, UnknownDomainError
from .tensor import Tensor, active_tape, needs_grad

_AXIS_NAMES_3D = ("T", "H", "W")
_AXIS_NAMES_2D = ("H", "W")


def _record(op, inputs, out, backward_fn):
    tape = active_tape()
    if tape is not None and any(needs_grad(t) for t in inputs if isinstance(t, Tensor)):
        tape.record(op, inputs, out, backward_fn)
    return out


def _accum(t, g):
    if needs_grad(t):
        t.accumulate_grad(g)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _record("add", (a, b), out, backward)


def mul(a, b):
    out = Tensor(a.data * b.data)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _record("mul", (a, b), out, backward)


def div(a, b):
    out = Tensor(a.data / b.data)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record("div", (a, b), out, backward)


def add_scalar(x, c):
    out = Tensor(x.data + x.data.dtype.type(c))

    def backward(g):
        _accum(x, g)

    return _record("add_scalar", (x,), out, backward)


def mul_scalar(x, c):
    c = x.data.dtype.type(c)
    out = Tensor(x.data * c)

    def backward(g):
        _accum(x, g * c)

    return _record("mul_scalar", (x,), out, backward)


# ---------------------------------------------------------------------------
# activations and pointwise transforms


def relu(x):
    out = Tensor(np.maximum(x.data, 0))

    def backward(g):
        _accum(x, g * (x.data > 0))

    return _record("relu", (x,), out, backward)


def sigmoid(x):
    d = x.data
    with np.errstate(over="ignore"):
        y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-d)), np.exp(d) / (1.0 + np.exp(d)))
    y = y.astype(d.dtype)
    out = Tensor(y)

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return _record("sigmoid", (x,), out, backward)


def log(x):
    out = Tensor(np.log(x.data))

    def backward(g):
        _accum(x, g / x.data)

    return _record("log", (x,), out, backward)


def exp(x):
    y = np.exp(x.data)
    out = Tensor(y)

    def backward(g):
        _accum(x, g * y)

    return _record("exp", (x,), out, backward)


def softplus(x):
    d = x.data
    y = np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0)
    out = Tensor(y.astype(d.dtype))

    def backward(g):
        with np.errstate(over="ignore"):
            sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-d)), np.exp(d) / (1.0 + np.exp(d)))
        _accum(x, g * sig.astype(d.dtype))

    return _record("softplus", (x,), out, backward)


def clamp_min(x, c):
    out = Tensor(np.maximum(x.data, x.data.dtype.type(c)))

    def backward(g):
        _accum(x, g * (x.data >= c))

    return _record("clamp_min", (x,), out, backward)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x, axes=None, keepdims=False):  # noqa: A001 - mirrors the op name
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))

    def backward(g):
        _accum(x, _spread(g, x.shape, axes, keepdims))

    return _record("sum", (x,), out, backward)


def mean(x, axes=None, keepdims=False):
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in _astuple(axes)]))
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def backward(g):
        _accum(x, _spread(g, x.shape, axes, keepdims) / x.data.dtype.type(count))

    return _record("mean", (x,), out, backward)


def _astuple(axes):
    return (axes,) if isinstance(axes, int) else tuple(axes)


def _spread(g, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(g, shape).astype(g.dtype, copy=True)
    if not keepdims:
        for ax in sorted(_astuple(axes)):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).astype(g.dtype, copy=True)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _record("reshape", (x,), out, backward)


def slice_batch(x, i):
    """Select sample ``i`` along the leading axis."""
    if not 0 <= i < x.shape[0]:
        raise ShapeError(f"batch index {i} out of range for extent {x.shape[0]}")
    out = Tensor(x.data[i])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        _accum(x, gx)

    return _record("slice_batch", (x,), out, backward)


def concat_channels(tensors):
    """Concatenate along the channel axis (axis 0 for 3D maps, 1 for batched)."""
    ndim = tensors[0].ndim
    axis = 0 if ndim == 3 else 1
    for i, t in enumerate(tensors):
        if t.ndim != ndim:
            raise ShapeError(f"concat input {i} has rank {t.ndim}, expected {ndim}")
        ref, cur = list(tensors[0].shape), list(t.shape)
        ref[axis] = cur[axis] = 0
        if ref != cur:
            raise ShapeError(
                f"concat input {i} shape {t.shape} incompatible with {tensors[0].shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * ndim
            sl[axis] = slice(start, start + s)
            _accum(t, g[tuple(sl)])
            start += s

    return _record("concat_channels", tuple(tensors), out, backward)


# ---------------------------------------------------------------------------
# linear layers


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape} do not chain")
    out = Tensor(a.data @ b.data)

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record("matmul", (a, b), out, backward)


def fully_connected(x, w, b):
    """x: [N,K], w: [K,M], b: [M] -> [N,M]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected shapes {x.shape} x {w.shape} do not chain")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"fully_connected bias shape {b.shape}, expected ({w.shape[1]},)")
    out = Tensor(x.data @ w.data + b.data)

    def backward(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0))

    return _record("fully_connected", (x, w, b), out, backward)


# ---------------------------------------------------------------------------
# convolution / pooling / resampling


def _check_conv(xsh, ksh, stride, pad, names):
    for ax, name in enumerate(names):
        if stride[ax] < 1:
            raise ShapeError(f"stride must be >= 1 on axis {name}, got {stride[ax]}")
        if pad[ax] < 0:
            raise ShapeError(f"padding must be >= 0 on axis {name}, got {pad[ax]}")
        padded = xsh[ax] + 2 * pad[ax]
        if ksh[ax] > padded:
            raise ShapeError(
                f"kernel extent {ksh[ax]} exceeds padded input extent {padded} on axis {name}")


def conv_output_shape(extents, kernel, stride, pad):
    return tuple((e + 2 * p - k) // s + 1
                 for e, k, s, p in zip(extents, kernel, stride, pad))


def conv3d(x, w, stride=(1, 1, 1), padding=(0, 0, 0)):
    """x: [Ci,T,H,W] or [N,Ci,T,H,W]; w: [Co,Ci,kT,kH,kW]."""
    if w.ndim != 5:
        raise ShapeError(f"conv3d kernel must have rank 5, got {w.ndim}")
    batched = x.ndim == 5
    if not batched and x.ndim != 4:
        raise ShapeError(f"conv3d input must have rank 4 or 5, got {x.ndim}")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input has {xd.shape[1]}, kernel expects {w.shape[1]}")
    _check_conv(xd.shape[2:], w.shape[2:], stride, padding, _AXIS_NAMES_3D)
    y = kernels.conv3d_forward(xd, w.data, stride, padding)
    out = Tensor(y if batched else y[0])

    def backward(g):
        gb = g if batched else g[None]
        if needs_grad(x):
            gx = kernels.conv3d_backward_input(gb, w.data, xd.shape, stride, padding)
            _accum(x, gx if batched else gx[0])
        if needs_grad(w):
            _accum(w, kernels.conv3d_backward_kernel(gb, xd, w.shape, stride, padding))

    return _record("conv3d", (x, w), out, backward)


def conv2d(x, w, stride=(1, 1), padding=(0, 0)):
    """x: [Ci,H,W] or [N,Ci,H,W]; w: [Co,Ci,kH,kW]."""
    if w.ndim != 4:
        raise ShapeError(f"conv2d kernel must have rank 4, got {w.ndim}")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ShapeError(f"conv2d input must have rank 3 or 4, got {x.ndim}")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {xd.shape[1]}, kernel expects {w.shape[1]}")
    _check_conv(xd.shape[2:], w.shape[2:], stride, padding, _AXIS_NAMES_2D)
    y = kernels.conv2d_forward(xd, w.data, stride, padding)
    out = Tensor(y if batched else y[0])

    def backward(g):
        gb = g if batched else g[None]
        if needs_grad(x):
            gx = kernels.conv2d_backward_input(gb, w.data, xd.shape, stride, padding)
            _accum(x, gx if batched else gx[0])
        if needs_grad(w):
            _accum(w, kernels.conv2d_backward_kernel(gb, xd, w.shape, stride, padding))

    return _record("conv2d", (x, w), out, backward)


def maxpool3d(x, window, stride=None):
    """x: [C,T,H,W] or [N,C,T,H,W]; gradient routes to the first max per window."""
    stride = tuple(stride) if stride is not None else tuple(window)
    batched = x.ndim == 5
    if not batched and x.ndim != 4:
        raise ShapeError(f"maxpool3d input must have rank 4 or 5, got {x.ndim}")
    xd = x.data if batched else x.data[None]
    for ax, name in enumerate(_AXIS_NAMES_3D):
        if window[ax] > xd.shape[2 + ax]:
            raise ShapeError(
                f"pool window {window[ax]} larger than input extent {xd.shape[2 + ax]} "
                f"on axis {name}")
        if stride[ax] < 1:
            raise ShapeError(f"stride must be >= 1 on axis {name}, got {stride[ax]}")
    y, arg = kernels.maxpool3d_forward(xd, tuple(window), stride)
    out = Tensor(y if batched else y[0])

    def backward(g):
        gb = g if batched else g[None]
        gx = kernels.maxpool3d_backward(gb, arg, xd.shape)
        _accum(x, gx if batched else gx[0])

    return _record("maxpool3d", (x,), out, backward)


def bilinear_upsample2x(x):
    """Double the trailing two axes with half-pixel-centered bilinear weights."""
    if x.ndim < 2:
        raise ShapeError(f"bilinear_upsample2x needs rank >= 2, got {x.ndim}")
    out = Tensor(kernels.upsample2x_forward(x.data))

    def backward(g):
        _accum(x, kernels.upsample2x_backward(g, x.shape))

    return _record("bilinear_upsample2x", (x,), out, backward)


# ---------------------------------------------------------------------------
# gradient reversal


def grl(x, lam):
    """Identity forward; backward multiplies the incoming gradient by -lam."""
    if lam < 0:
        raise ShapeError(f"grl lambda must be >= 0, got {lam}")
    out = Tensor(x.data)

    def backward(g):
        _accum(x, g * x.data.dtype.type(-lam))

    return _record("grl", (x,), out, backward)


# ---------------------------------------------------------------------------
# batch normalization with per-domain running statistics


class RunningStats:
    """Per-domain running mean/variance for one normalization layer."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.per_domain = {}

    def has(self, domain):
        return domain in self.per_domain

    def get(self, domain):
        if domain not in self.per_domain:
            raise UnknownDomainError(
                f"no running statistics for domain {domain}; it was never trained")
        return self.per_domain[domain]

    def update(self, domain, mean, var):
        if domain not in self.per_domain:
            self.per_domain[domain] = (mean.astype(np.float32), var.astype(np.float32))
        else:
            m, v = self.per_domain[domain]
            mom = np.float32(self.momentum)
            self.per_domain[domain] = ((1 - mom) * m + mom * mean.astype(np.float32),
                                       (1 - mom) * v + mom * var.astype(np.float32))

    def state_items(self):
        for d in sorted(self.per_domain):
            m, v = self.per_domain[d]
            yield d, m, v

    def load(self, domain, mean, var):
        self.per_domain[domain] = (mean.astype(np.float32), var.astype(np.float32))


def batchnorm(x, scale, shift, stats, domain=0, training=False):
    """Normalize per channel (axis 1). Train mode uses batch statistics and
    updates the domain's running stats; eval mode uses the stored stats."""
    if x.ndim < 2:
        raise ShapeError(f"batchnorm input must have rank >= 2, got {x.ndim}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batchnorm scale/shift must have shape ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    eps = x.data.dtype.type(stats.eps)
    scale_b = scale.data.reshape(bshape).astype(x.dtype)
    shift_b = shift.data.reshape(bshape).astype(x.dtype)

    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        stats.update(domain, mu.reshape(c), var.reshape(c))
    else:
        rm, rv = stats.get(domain)
        mu = rm.reshape(bshape).astype(x.dtype)
        var = rv.reshape(bshape).astype(x.dtype)

    ivstd = 1.0 / np.sqrt(var + eps)
    xmu = x.data - mu
    xhat = xmu * ivstd
    out = Tensor(scale_b * xhat + shift_b)
    m = x.data.dtype.type(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        _accum(shift, g.sum(axis=axes))
        _accum(scale, (g * xhat).sum(axis=axes))
        if not needs_grad(x):
            return
        gxhat = g * scale_b
        if training:
            gvar = (gxhat * xmu).sum(axis=axes, keepdims=True) * (-0.5) * ivstd ** 3
            gmu = (-(gxhat * ivstd).sum(axis=axes, keepdims=True)
                   + gvar * (-2.0 / m) * xmu.sum(axis=axes, keepdims=True))
            _accum(x, gxhat * ivstd + gvar * (2.0 / m) * xmu + gmu / m)
        else:
            _accum(x, gxhat * ivstd)

    return _record("batchnorm", (x, scale, shift), out, backward)
