"""Numpy reference kernels.

Pure-numpy implementations of the hot inner loops (3D/2D convolution and
3D max pooling, forward and backward). The compiled extension in
``_ckernels.pyx`` implements the same contract; either backend can serve
``hiersal.kernels``. Convolutions here go through sliding windows plus
``tensordot`` (BLAS); backward-input scatters one kernel offset at a time.

All functions assume validated, C-contiguous inputs: shape checking and
error reporting happen in ``hiersal.ops``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3d_forward(x, w, stride, pad):
    """x: [N,Ci,T,H,W], w: [Co,Ci,kT,kH,kW] -> [N,Co,T',H',W']."""
    st, sh, sw = stride
    pt, ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    v = sliding_window_view(xp, w.shape[2:], axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    out = np.tensordot(v, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def conv3d_backward_kernel(gout, x, kshape, stride, pad):
    st, sh, sw = stride
    pt, ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    v = sliding_window_view(xp, kshape[2:], axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    gw = np.tensordot(gout, v, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return np.ascontiguousarray(gw)


def conv3d_backward_input(gout, w, xshape, stride, pad):
    n, ci, t, h, wd = xshape
    kt, kh, kw = w.shape[2:]
    st, sh, sw = stride
    pt, ph, pw = pad
    to, ho, wo = gout.shape[2:]
    gxp = np.zeros((n, ci, t + 2 * pt, h + 2 * ph, wd + 2 * pw), dtype=gout.dtype)
    for i in range(kt):
        for j in range(kh):
            for l in range(kw):
                g = np.tensordot(gout, w[:, :, i, j, l], axes=([1], [0]))
                gxp[:, :, i:i + st * to:st, j:j + sh * ho:sh, l:l + sw * wo:sw] += (
                    np.moveaxis(g, -1, 1))
    return np.ascontiguousarray(gxp[:, :, pt:pt + t, ph:ph + h, pw:pw + wd])


def conv2d_forward(x, w, stride, pad):
    """x: [N,Ci,H,W], w: [Co,Ci,kH,kW] -> [N,Co,H',W']."""
    sh, sw = stride
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    v = sliding_window_view(xp, w.shape[2:], axis=(2, 3))[:, :, ::sh, ::sw]
    out = np.tensordot(v, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def conv2d_backward_kernel(gout, x, kshape, stride, pad):
    sh, sw = stride
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    v = sliding_window_view(xp, kshape[2:], axis=(2, 3))[:, :, ::sh, ::sw]
    gw = np.tensordot(gout, v, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(gw)


def conv2d_backward_input(gout, w, xshape, stride, pad):
    n, ci, h, wd = xshape
    kh, kw = w.shape[2:]
    sh, sw = stride
    ph, pw = pad
    ho, wo = gout.shape[2:]
    gxp = np.zeros((n, ci, h + 2 * ph, wd + 2 * pw), dtype=gout.dtype)
    for j in range(kh):
        for l in range(kw):
            g = np.tensordot(gout, w[:, :, j, l], axes=([1], [0]))
            gxp[:, :, j:j + sh * ho:sh, l:l + sw * wo:sw] += np.moveaxis(g, -1, 1)
    return np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + wd])


def maxpool3d_forward(x, window, stride):
    """x: [N,C,T,H,W] -> (out, argmax) with flat input indices for backward.

    Ties resolve to the first position in row-major window order.
    """
    n, c, t, h, w = x.shape
    wt, wh, ww = window
    st, sh, sw = stride
    v = sliding_window_view(x, window, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    to, ho, wo = v.shape[2:5]
    flat = v.reshape(n, c, to, ho, wo, wt * wh * ww)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    ti = arg // (wh * ww) + np.arange(to)[:, None, None] * st
    hi = (arg // ww) % wh + np.arange(ho)[None, :, None] * sh
    wi = arg % ww + np.arange(wo)[None, None, :] * sw
    nc = np.arange(n * c).reshape(n, c, 1, 1, 1)
    argflat = ((nc * t + ti) * h + hi) * w + wi
    return np.ascontiguousarray(out), argflat.astype(np.int64)


def maxpool3d_backward(gout, argmax, xshape):
    gx = np.zeros(int(np.prod(xshape)), dtype=gout.dtype)
    np.add.at(gx, argmax.ravel(), gout.ravel())
    return gx.reshape(xshape)


def _up2x_axis(n):
    o = np.arange(2 * n)
    s = (o + 0.5) / 2.0 - 0.5
    i0 = np.floor(s).astype(np.int64)
    frac = s - i0
    i1 = np.clip(i0 + 1, 0, n - 1)
    i0 = np.clip(i0, 0, n - 1)
    return i0, i1, frac


def upsample2x_forward(x):
    """Half-pixel-centered bilinear 2x upsampling of the last two axes."""
    h, w = x.shape[-2:]
    iy0, iy1, fy = _up2x_axis(h)
    ix0, ix1, fx = _up2x_axis(w)
    fy = fy.astype(x.dtype)
    fx = fx.astype(x.dtype)
    rows = x[..., iy0, :] * (1 - fy)[:, None] + x[..., iy1, :] * fy[:, None]
    return rows[..., :, ix0] * (1 - fx) + rows[..., :, ix1] * fx


def upsample2x_backward(gout, xshape):
    h, w = xshape[-2:]
    iy0, iy1, fy = _up2x_axis(h)
    ix0, ix1, fx = _up2x_axis(w)
    fy = fy.astype(gout.dtype)
    fx = fx.astype(gout.dtype)
    grows = np.zeros(gout.shape[:-1] + (w,), dtype=gout.dtype)
    np.add.at(grows, (Ellipsis, ix0), gout * (1 - fx))
    np.add.at(grows, (Ellipsis, ix1), gout * fx)
    gx = np.zeros(xshape, dtype=gout.dtype)
    np.add.at(gx, (Ellipsis, iy0, slice(None)), grows * (1 - fy)[:, None])
    np.add.at(gx, (Ellipsis, iy1, slice(None)), grows * fy[:, None])
    return gx
