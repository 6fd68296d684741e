# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3-D cross-correlation kernels.

Same contracts as ``_conv_numpy``: ``xp`` is pre-padded ``(N, C, Dp, Hp, Wp)``
float64, C-contiguous.  Small kernels go through an im2col gather and one
BLAS dgemm per sample; large kernels (the learned blur) use direct loops.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND = "cython"

DEF IM2COL_MAX_TAPS = 27


cdef void _gather(const double[:, :, :, ::1] x, double[:, ::1] cols,
                  int kd, int kh, int kw, int s, int do, int ho, int wo) noexcept nogil:
    cdef int c, i, j, k, z, y, xx, row, col
    cdef int nc = x.shape[0]
    for c in range(nc):
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    row = ((c * kd + i) * kh + j) * kw + k
                    col = 0
                    for z in range(do):
                        for y in range(ho):
                            for xx in range(wo):
                                cols[row, col] = x[c, z * s + i, y * s + j, xx * s + k]
                                col += 1


cdef void _direct(const double[:, :, :, ::1] x, const double[:, :, :, :, ::1] w,
                  double[:, :, :, ::1] out, int s) noexcept nogil:
    cdef int o, c, i, j, k, z, y, xx
    cdef int no = w.shape[0], nc = w.shape[1]
    cdef int kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef int do = out.shape[1], ho = out.shape[2], wo = out.shape[3]
    cdef double wv
    cdef const double* src
    cdef double* dst
    for o in range(no):
        for c in range(nc):
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        wv = w[o, c, i, j, k]
                        if wv == 0.0:
                            continue
                        for z in range(do):
                            for y in range(ho):
                                src = &x[c, z * s + i, y * s + j, k]
                                dst = &out[o, z, y, 0]
                                for xx in range(wo):
                                    dst[xx] += wv * src[xx * s]


cdef void _direct_wgrad(const double[:, :, :, ::1] x, const double[:, :, :, ::1] g,
                        double[:, :, :, :, ::1] gw, int s) noexcept nogil:
    cdef int o, c, i, j, k, z, y, xx
    cdef int no = gw.shape[0], nc = gw.shape[1]
    cdef int kd = gw.shape[2], kh = gw.shape[3], kw = gw.shape[4]
    cdef int do = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef double acc
    cdef const double* src
    cdef const double* gr
    for o in range(no):
        for c in range(nc):
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        acc = 0.0
                        for z in range(do):
                            for y in range(ho):
                                src = &x[c, z * s + i, y * s + j, k]
                                gr = &g[o, z, y, 0]
                                for xx in range(wo):
                                    acc += gr[xx] * src[xx * s]
                        gw[o, c, i, j, k] += acc


def correlate_padded(xp, w, int stride=1):
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef int n = xp.shape[0], nc = xp.shape[1]
    cdef int no = w.shape[0], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef int s = stride
    cdef int do = (xp.shape[2] - kd) // s + 1
    cdef int ho = (xp.shape[3] - kh) // s + 1
    cdef int wo = (xp.shape[4] - kw) // s + 1
    cdef int taps = kd * kh * kw
    cdef int K = nc * taps, V = do * ho * wo
    out = np.zeros((n, no, do, ho, wo))
    cdef double[:, :, :, :, ::1] ov = out
    cdef double[:, :, :, :, ::1] xv = xp
    cdef double[:, :, :, :, ::1] wv = w
    cdef double[:, ::1] cols
    cdef double[:, ::1] wmat
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N'
    cdef int b
    if taps <= IM2COL_MAX_TAPS:
        cols = np.empty((K, V))
        wmat = w.reshape(no, K)
        for b in range(n):
            with nogil:
                _gather(xv[b], cols, kd, kh, kw, s, do, ho, wo)
                # row-major out(no x V) = wmat(no x K) @ cols(K x V)
                dgemm(&tn, &tn, &V, &no, &K, &one, &cols[0, 0], &V,
                      &wmat[0, 0], &K, &zero, &ov[b, 0, 0, 0, 0], &V)
    else:
        for b in range(n):
            with nogil:
                _direct(xv[b], wv, ov[b], s)
    return out


def correlate_weight_grad(xp, gout, ksize, int stride=1):
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    cdef int n = xp.shape[0], nc = xp.shape[1]
    cdef int no = gout.shape[1], do = gout.shape[2], ho = gout.shape[3], wo = gout.shape[4]
    cdef int kd = ksize[0], kh = ksize[1], kw = ksize[2]
    cdef int s = stride
    cdef int taps = kd * kh * kw
    cdef int K = nc * taps, V = do * ho * wo
    gw = np.zeros((no, nc, kd, kh, kw))
    cdef double[:, :, :, :, ::1] gwv = gw
    cdef double[:, :, :, :, ::1] xv = xp
    cdef double[:, :, :, :, ::1] gv = gout
    cdef double[:, ::1] cols
    cdef double one = 1.0
    cdef char tt = b'T', tn = b'N'
    cdef int b
    if taps <= IM2COL_MAX_TAPS:
        cols = np.empty((K, V))
        for b in range(n):
            with nogil:
                _gather(xv[b], cols, kd, kh, kw, s, do, ho, wo)
                # row-major gw(no x K) += g(no x V) @ cols(K x V)^T
                dgemm(&tt, &tn, &K, &no, &V, &one, &cols[0, 0], &V,
                      &gv[b, 0, 0, 0, 0], &V, &one, &gwv[0, 0, 0, 0, 0], &K)
    else:
        for b in range(n):
            with nogil:
                _direct_wgrad(xv[b], gv[b], gwv, s)
    return gw
