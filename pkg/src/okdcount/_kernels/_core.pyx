# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the hot convolution/pooling loops.

Parallel loops run only over race-free axes (batch, out-channel) with a
static schedule and a fixed inner summation order, so outputs are bitwise
identical for any thread count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

ctypedef cnp.int64_t i64


def conv2d_forward(object x, object w, object b, int dilation, int padding, int num_threads=1):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cdef double[:, :, :, ::1] xv = x
    cdef double[:, :, :, ::1] wv = w
    cdef double[::1] bv = b
    cdef Py_ssize_t B = xv.shape[0], Ci = xv.shape[1]
    cdef Py_ssize_t Hp = xv.shape[2], Wp = xv.shape[3]
    cdef Py_ssize_t Co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3]
    cdef Py_ssize_t Ho = Hp - dilation * (kh - 1)
    cdef Py_ssize_t Wo = Wp - dilation * (kw - 1)
    out = np.empty((B, Co, Ho, Wo))
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t t, bi, co, ci, ki, kj, oi, oj, ib, jb
    cdef double wval, bval
    cdef int nt = num_threads
    for t in prange(B * Co, nogil=True, schedule='static', num_threads=nt):
        bi = t // Co
        co = t - bi * Co
        bval = bv[co]
        for oi in range(Ho):
            for oj in range(Wo):
                ov[bi, co, oi, oj] = bval
        for ci in range(Ci):
            for ki in range(kh):
                ib = ki * dilation
                for kj in range(kw):
                    jb = kj * dilation
                    wval = wv[co, ci, ki, kj]
                    for oi in range(Ho):
                        for oj in range(Wo):
                            ov[bi, co, oi, oj] += wval * xv[bi, ci, oi + ib, oj + jb]
    return out


def conv2d_backward_input(object gout, object w, int dilation, int padding,
                          Py_ssize_t H, Py_ssize_t W, int num_threads=1):
    cdef double[:, :, :, ::1] gv = gout
    cdef double[:, :, :, ::1] wv = w
    cdef Py_ssize_t B = gv.shape[0], Co = gv.shape[1], Ho = gv.shape[2], Wo = gv.shape[3]
    cdef Py_ssize_t Ci = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3]
    ginp = np.zeros((B, Ci, H + 2 * padding, W + 2 * padding))
    cdef double[:, :, :, ::1] pv = ginp
    cdef Py_ssize_t bi, co, ci, ki, kj, oi, oj, ib, jb
    cdef double wval
    cdef int nt = num_threads
    for bi in prange(B, nogil=True, schedule='static', num_threads=nt):
        for co in range(Co):
            for ci in range(Ci):
                for ki in range(kh):
                    ib = ki * dilation
                    for kj in range(kw):
                        jb = kj * dilation
                        wval = wv[co, ci, ki, kj]
                        for oi in range(Ho):
                            for oj in range(Wo):
                                pv[bi, ci, oi + ib, oj + jb] += wval * gv[bi, co, oi, oj]
    if padding:
        return np.ascontiguousarray(ginp[:, :, padding : padding + H, padding : padding + W])
    return ginp


def conv2d_backward_weight(object gout, object x, Py_ssize_t kh, Py_ssize_t kw,
                           int dilation, int padding, int num_threads=1):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cdef double[:, :, :, ::1] gv = gout
    cdef double[:, :, :, ::1] xv = x
    cdef Py_ssize_t B = gv.shape[0], Co = gv.shape[1], Ho = gv.shape[2], Wo = gv.shape[3]
    cdef Py_ssize_t Ci = xv.shape[1]
    gw = np.zeros((Co, Ci, kh, kw))
    gb = np.zeros(Co)
    cdef double[:, :, :, ::1] gwv = gw
    cdef double[::1] gbv = gb
    cdef Py_ssize_t co, ci, ki, kj, bi, oi, oj, ib, jb
    cdef double acc, bacc
    cdef int nt = num_threads
    for co in prange(Co, nogil=True, schedule='static', num_threads=nt):
        for ci in range(Ci):
            for ki in range(kh):
                ib = ki * dilation
                for kj in range(kw):
                    jb = kj * dilation
                    acc = 0.0
                    for bi in range(B):
                        for oi in range(Ho):
                            for oj in range(Wo):
                                acc = acc + gv[bi, co, oi, oj] * xv[bi, ci, oi + ib, oj + jb]
                    gwv[co, ci, ki, kj] = acc
        bacc = 0.0
        for bi in range(B):
            for oi in range(Ho):
                for oj in range(Wo):
                    bacc = bacc + gv[bi, co, oi, oj]
        gbv[co] = bacc
    return gw, gb


def maxpool2d_forward(object x, int k, int stride, int num_threads=1):
    cdef double[:, :, :, ::1] xv = x
    cdef Py_ssize_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef Py_ssize_t Ho = H // stride, Wo = W // stride
    out = np.empty((B, C, Ho, Wo))
    arg = np.empty((B, C, Ho, Wo), dtype=np.int64)
    cdef double[:, :, :, ::1] ov = out
    cdef i64[:, :, :, ::1] av = arg
    cdef Py_ssize_t t, bi, c, oi, oj, ii, jj, i0, j0
    cdef double best, v
    cdef i64 bestidx
    cdef int nt = num_threads
    for t in prange(B * C, nogil=True, schedule='static', num_threads=nt):
        bi = t // C
        c = t - bi * C
        for oi in range(Ho):
            i0 = oi * stride
            for oj in range(Wo):
                j0 = oj * stride
                # first maximum in row-major window order wins ties
                best = xv[bi, c, i0, j0]
                bestidx = i0 * W + j0
                for ii in range(k):
                    for jj in range(k):
                        v = xv[bi, c, i0 + ii, j0 + jj]
                        if v > best:
                            best = v
                            bestidx = (i0 + ii) * W + (j0 + jj)
                ov[bi, c, oi, oj] = best
                av[bi, c, oi, oj] = bestidx
    return out, arg


def maxpool2d_backward(object gout, object idx, int k, int stride,
                       Py_ssize_t H, Py_ssize_t W, int num_threads=1):
    cdef double[:, :, :, ::1] gv = gout
    cdef i64[:, :, :, ::1] av = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t B = gv.shape[0], C = gv.shape[1], Ho = gv.shape[2], Wo = gv.shape[3]
    gin = np.zeros((B, C, H, W))
    cdef double[:, :, :, ::1] ginv = gin
    cdef Py_ssize_t t, bi, c, oi, oj
    cdef i64 f, gi, gj
    cdef int nt = num_threads
    for t in prange(B * C, nogil=True, schedule='static', num_threads=nt):
        bi = t // C
        c = t - bi * C
        for oi in range(Ho):
            for oj in range(Wo):
                f = av[bi, c, oi, oj]
                gi = f // W
                gj = f - gi * W
                ginv[bi, c, gi, gj] += gv[bi, c, oi, oj]
    return gin


def adaptive_avg_pool_forward(object x, Py_ssize_t oh, Py_ssize_t ow, int num_threads=1):
    cdef double[:, :, :, ::1] xv = x
    cdef Py_ssize_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    r0a = (np.arange(oh, dtype=np.int64) * H) // oh
    r1a = -((-(np.arange(oh, dtype=np.int64) + 1) * H) // oh)
    c0a = (np.arange(ow, dtype=np.int64) * W) // ow
    c1a = -((-(np.arange(ow, dtype=np.int64) + 1) * W) // ow)
    cdef i64[::1] r0 = r0a, r1 = r1a, c0 = c0a, c1 = c1a
    out = np.empty((B, C, oh, ow))
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t t, bi, c, oi, oj, i, j
    cdef double acc
    cdef int nt = num_threads
    for t in prange(B * C, nogil=True, schedule='static', num_threads=nt):
        bi = t // C
        c = t - bi * C
        for oi in range(oh):
            for oj in range(ow):
                acc = 0.0
                for i in range(r0[oi], r1[oi]):
                    for j in range(c0[oj], c1[oj]):
                        acc = acc + xv[bi, c, i, j]
                ov[bi, c, oi, oj] = acc / ((r1[oi] - r0[oi]) * (c1[oj] - c0[oj]))
    return out


def adaptive_avg_pool_backward(object gout, Py_ssize_t H, Py_ssize_t W, int num_threads=1):
    cdef double[:, :, :, ::1] gv = gout
    cdef Py_ssize_t B = gv.shape[0], C = gv.shape[1], oh = gv.shape[2], ow = gv.shape[3]
    r0a = (np.arange(oh, dtype=np.int64) * H) // oh
    r1a = -((-(np.arange(oh, dtype=np.int64) + 1) * H) // oh)
    c0a = (np.arange(ow, dtype=np.int64) * W) // ow
    c1a = -((-(np.arange(ow, dtype=np.int64) + 1) * W) // ow)
    cdef i64[::1] r0 = r0a, r1 = r1a, c0 = c0a, c1 = c1a
    gin = np.zeros((B, C, H, W))
    cdef double[:, :, :, ::1] ginv = gin
    cdef Py_ssize_t t, bi, c, oi, oj, i, j
    cdef double g
    cdef int nt = num_threads
    for t in prange(B * C, nogil=True, schedule='static', num_threads=nt):
        bi = t // C
        c = t - bi * C
        for oi in range(oh):
            for oj in range(ow):
                g = gv[bi, c, oi, oj] / ((r1[oi] - r0[oi]) * (c1[oj] - c0[oj]))
                for i in range(r0[oi], r1[oi]):
                    for j in range(c0[oj], c1[oj]):
                        ginv[bi, c, i, j] += g
    return gin
