# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core: direct-loop 3D/2D convolution and 3D max pooling.

Same contract as ``pykernels``; selected at import by ``hiersal.kernels``
when the extension is built. Accumulation runs in double regardless of the
input dtype. Single-threaded on purpose: backward scatter order must be
deterministic.
"""

import numpy as np

ctypedef fused real:
    float
    double


def conv3d_forward(x, w, stride, pad):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t t = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t co = w.shape[0], kt = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t st = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t pt = pad[0], ph = pad[1], pw = pad[2]
    cdef Py_ssize_t to = (t + 2 * pt - kt) // st + 1
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (wd + 2 * pw - kw) // sw + 1
    out = np.empty((n, co, to, ho, wo), dtype=x.dtype)
    _conv3d_fwd(x, w, out, st, sh, sw, pt, ph, pw)
    return out


def _conv3d_fwd(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] w,
                real[:, :, :, :, ::1] out,
                Py_ssize_t st, Py_ssize_t sh, Py_ssize_t sw,
                Py_ssize_t pt, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t N = x.shape[0], Ci = x.shape[1]
    cdef Py_ssize_t T = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Co = w.shape[0], kT = w.shape[2], kH = w.shape[3], kW = w.shape[4]
    cdef Py_ssize_t To = out.shape[2], Ho = out.shape[3], Wo = out.shape[4]
    cdef Py_ssize_t n, c, ot, oh, ow, ic, i, j, l
    cdef Py_ssize_t t0, h0, w0, ilo, ihi, jlo, jhi, llo, lhi
    cdef double acc
    for n in range(N):
        for c in range(Co):
            for ot in range(To):
                t0 = ot * st - pt
                ilo = -t0 if t0 < 0 else 0
                ihi = T - t0 if T - t0 < kT else kT
                for oh in range(Ho):
                    h0 = oh * sh - ph
                    jlo = -h0 if h0 < 0 else 0
                    jhi = H - h0 if H - h0 < kH else kH
                    for ow in range(Wo):
                        w0 = ow * sw - pw
                        llo = -w0 if w0 < 0 else 0
                        lhi = W - w0 if W - w0 < kW else kW
                        acc = 0.0
                        for ic in range(Ci):
                            for i in range(ilo, ihi):
                                for j in range(jlo, jhi):
                                    for l in range(llo, lhi):
                                        acc = acc + (<double>x[n, ic, t0 + i, h0 + j, w0 + l]
                                                     * <double>w[c, ic, i, j, l])
                        out[n, c, ot, oh, ow] = <real>acc


def conv3d_backward_input(gout, w, xshape, stride, pad):
    gx = np.zeros(xshape, dtype=gout.dtype)
    _conv3d_bwd_input(gout, w, gx, stride[0], stride[1], stride[2],
                      pad[0], pad[1], pad[2])
    return gx


def _conv3d_bwd_input(real[:, :, :, :, ::1] gout, real[:, :, :, :, ::1] w,
                      real[:, :, :, :, ::1] gx,
                      Py_ssize_t st, Py_ssize_t sh, Py_ssize_t sw,
                      Py_ssize_t pt, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t N = gx.shape[0], Ci = gx.shape[1]
    cdef Py_ssize_t T = gx.shape[2], H = gx.shape[3], W = gx.shape[4]
    cdef Py_ssize_t Co = w.shape[0], kT = w.shape[2], kH = w.shape[3], kW = w.shape[4]
    cdef Py_ssize_t To = gout.shape[2], Ho = gout.shape[3], Wo = gout.shape[4]
    cdef Py_ssize_t n, c, ot, oh, ow, ic, i, j, l
    cdef Py_ssize_t t0, h0, w0, ilo, ihi, jlo, jhi, llo, lhi
    cdef real g
    for n in range(N):
        for c in range(Co):
            for ot in range(To):
                t0 = ot * st - pt
                ilo = -t0 if t0 < 0 else 0
                ihi = T - t0 if T - t0 < kT else kT
                for oh in range(Ho):
                    h0 = oh * sh - ph
                    jlo = -h0 if h0 < 0 else 0
                    jhi = H - h0 if H - h0 < kH else kH
                    for ow in range(Wo):
                        w0 = ow * sw - pw
                        llo = -w0 if w0 < 0 else 0
                        lhi = W - w0 if W - w0 < kW else kW
                        g = gout[n, c, ot, oh, ow]
                        for ic in range(Ci):
                            for i in range(ilo, ihi):
                                for j in range(jlo, jhi):
                                    for l in range(llo, lhi):
                                        gx[n, ic, t0 + i, h0 + j, w0 + l] += g * w[c, ic, i, j, l]


def conv3d_backward_kernel(gout, x, kshape, stride, pad):
    gw = np.zeros(kshape, dtype=gout.dtype)
    _conv3d_bwd_kernel(gout, x, gw, stride[0], stride[1], stride[2],
                       pad[0], pad[1], pad[2])
    return gw


def _conv3d_bwd_kernel(real[:, :, :, :, ::1] gout, real[:, :, :, :, ::1] x,
                       real[:, :, :, :, ::1] gw,
                       Py_ssize_t st, Py_ssize_t sh, Py_ssize_t sw,
                       Py_ssize_t pt, Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t N = x.shape[0], Ci = x.shape[1]
    cdef Py_ssize_t T = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Co = gw.shape[0], kT = gw.shape[2], kH = gw.shape[3], kW = gw.shape[4]
    cdef Py_ssize_t To = gout.shape[2], Ho = gout.shape[3], Wo = gout.shape[4]
    cdef Py_ssize_t n, c, ot, oh, ow, ic, i, j, l, ti, hi, wi
    cdef double acc
    for c in range(Co):
        for ic in range(Ci):
            for i in range(kT):
                for j in range(kH):
                    for l in range(kW):
                        acc = 0.0
                        for n in range(N):
                            for ot in range(To):
                                ti = ot * st - pt + i
                                if ti < 0 or ti >= T:
                                    continue
                                for oh in range(Ho):
                                    hi = oh * sh - ph + j
                                    if hi < 0 or hi >= H:
                                        continue
                                    for ow in range(Wo):
                                        wi = ow * sw - pw + l
                                        if wi < 0 or wi >= W:
                                            continue
                                        acc = acc + (<double>gout[n, c, ot, oh, ow]
                                                     * <double>x[n, ic, ti, hi, wi])
                        gw[c, ic, i, j, l] = <real>acc


def conv2d_forward(x, w, stride, pad):
    x5 = x[:, :, None, :, :]
    w5 = w[:, :, None, :, :]
    out = conv3d_forward(x5, w5, (1, stride[0], stride[1]), (0, pad[0], pad[1]))
    return out[:, :, 0]


def conv2d_backward_input(gout, w, xshape, stride, pad):
    n, ci, h, wd = xshape
    gx = conv3d_backward_input(gout[:, :, None], w[:, :, None], (n, ci, 1, h, wd),
                               (1, stride[0], stride[1]), (0, pad[0], pad[1]))
    return gx[:, :, 0]


def conv2d_backward_kernel(gout, x, kshape, stride, pad):
    co, ci, kh, kw = kshape
    gw = conv3d_backward_kernel(gout[:, :, None], x[:, :, None], (co, ci, 1, kh, kw),
                                (1, stride[0], stride[1]), (0, pad[0], pad[1]))
    return gw[:, :, 0]


def maxpool3d_forward(x, window, stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t t = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t wt = window[0], wh = window[1], ww = window[2]
    cdef Py_ssize_t st = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t to = (t - wt) // st + 1
    cdef Py_ssize_t ho = (h - wh) // sh + 1
    cdef Py_ssize_t wo = (wd - ww) // sw + 1
    out = np.empty((n, c, to, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, to, ho, wo), dtype=np.int64)
    _maxpool3d_fwd(x, out, arg, wt, wh, ww, st, sh, sw)
    return out, arg


def _maxpool3d_fwd(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] out,
                   long long[:, :, :, :, ::1] arg,
                   Py_ssize_t wt, Py_ssize_t wh, Py_ssize_t ww,
                   Py_ssize_t st, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t T = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t To = out.shape[2], Ho = out.shape[3], Wo = out.shape[4]
    cdef Py_ssize_t n, c, ot, oh, ow, i, j, l, ti, hi, wi
    cdef Py_ssize_t best_idx
    cdef real best, v
    for n in range(N):
        for c in range(C):
            for ot in range(To):
                for oh in range(Ho):
                    for ow in range(Wo):
                        best = x[n, c, ot * st, oh * sh, ow * sw]
                        best_idx = ((n * C + c) * T + ot * st) * H * W + (oh * sh) * W + ow * sw
                        for i in range(wt):
                            ti = ot * st + i
                            for j in range(wh):
                                hi = oh * sh + j
                                for l in range(ww):
                                    wi = ow * sw + l
                                    v = x[n, c, ti, hi, wi]
                                    if v > best:
                                        best = v
                                        best_idx = ((n * C + c) * T + ti) * H * W + hi * W + wi
                        out[n, c, ot, oh, ow] = best
                        arg[n, c, ot, oh, ow] = best_idx


def maxpool3d_backward(gout, argmax, xshape):
    gx = np.zeros(xshape, dtype=gout.dtype)
    _maxpool3d_bwd(gout.reshape(-1), argmax.reshape(-1), gx.reshape(-1))
    return gx


def _maxpool3d_bwd(real[::1] gout, long long[::1] argmax, real[::1] gx):
    cdef Py_ssize_t i
    for i in range(gout.shape[0]):
        gx[argmax[i]] += gout[i]
