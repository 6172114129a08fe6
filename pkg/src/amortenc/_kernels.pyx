# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: fused row-wise normalization/softmax, GELU, and
uint8 affine quantization.

Semantics mirror :mod:`amortenc.kernels_np`; the dispatch layer treats
the two backends as interchangeable.  Kernels fuse the temporaries the
numpy versions allocate, which is what makes them win at desk scale
where arrays are small and allocation overhead dominates.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt, floor, ceil

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327

name = "ext"


def gelu_fwd(real[::1] x, real[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    for i in range(n):
        v = <double> x[i]
        out[i] = <real> (0.5 * v * (1.0 + erf(v * INV_SQRT2)))


def gelu_bwd(real[::1] x, real[::1] dy, real[::1] dx):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, cdf, pdf
    for i in range(n):
        v = <double> x[i]
        cdf = 0.5 * (1.0 + erf(v * INV_SQRT2))
        pdf = exp(-0.5 * v * v) * INV_SQRT_2PI
        dx[i] = <real> ((<double> dy[i]) * (cdf + v * pdf))


def layernorm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias,
                  double eps, real[:, ::1] y, real[:, ::1] xhat,
                  real[::1] rstd):
    cdef Py_ssize_t r, j, rows = x.shape[0], d = x.shape[1]
    cdef double mean, var, rs, dev
    for r in range(rows):
        mean = 0.0
        for j in range(d):
            mean += <double> x[r, j]
        mean /= d
        var = 0.0
        for j in range(d):
            dev = (<double> x[r, j]) - mean
            var += dev * dev
        var /= d
        rs = 1.0 / sqrt(var + eps)
        rstd[r] = <real> rs
        for j in range(d):
            dev = ((<double> x[r, j]) - mean) * rs
            xhat[r, j] = <real> dev
            y[r, j] = <real> (dev * (<double> gain[j]) + (<double> bias[j]))


def layernorm_bwd(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd,
                  real[::1] gain, real[:, ::1] dx, real[::1] dgain,
                  real[::1] dbias):
    cdef Py_ssize_t r, j, rows = dy.shape[0], d = dy.shape[1]
    cdef double m1, m2, g, h, rs
    for j in range(d):
        dgain[j] = 0
        dbias[j] = 0
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            g = <double> dy[r, j]
            h = <double> xhat[r, j]
            dgain[j] += <real> (g * h)
            dbias[j] += <real> g
            g *= <double> gain[j]
            m1 += g
            m2 += g * h
        m1 /= d
        m2 /= d
        rs = <double> rstd[r]
        for j in range(d):
            g = (<double> dy[r, j]) * (<double> gain[j])
            dx[r, j] = <real> (rs * (g - m1 - (<double> xhat[r, j]) * m2))


def softmax_fwd(real[:, ::1] scores, real[:, ::1] out):
    cdef Py_ssize_t r, j, rows = scores.shape[0], n = scores.shape[1]
    cdef double m, s, e
    for r in range(rows):
        m = <double> scores[r, 0]
        for j in range(1, n):
            if (<double> scores[r, j]) > m:
                m = <double> scores[r, j]
        s = 0.0
        for j in range(n):
            e = exp((<double> scores[r, j]) - m)
            out[r, j] = <real> e
            s += e
        for j in range(n):
            out[r, j] = <real> ((<double> out[r, j]) / s)


def softmax_bwd(real[:, ::1] probs, real[:, ::1] dprobs, real[:, ::1] out):
    cdef Py_ssize_t r, j, rows = probs.shape[0], n = probs.shape[1]
    cdef double inner
    for r in range(rows):
        inner = 0.0
        for j in range(n):
            inner += (<double> dprobs[r, j]) * (<double> probs[r, j])
        for j in range(n):
            out[r, j] = <real> ((<double> probs[r, j])
                                * ((<double> dprobs[r, j]) - inner))


def quantize_u8(real[::1] x, double scale, long zero_point,
                cnp.uint8_t[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double t, q
    for i in range(n):
        t = (<double> x[i]) / scale
        if t >= 0:
            q = floor(t + 0.5)
        else:
            q = ceil(t - 0.5)
        q += zero_point
        if q < 0:
            q = 0
        elif q > 255:
            q = 255
        out[i] = <cnp.uint8_t> q


def dequantize_u8(const cnp.uint8_t[::1] q, double scale, long zero_point,
                  real[::1] out):
    cdef Py_ssize_t i, n = q.shape[0]
    for i in range(n):
        out[i] = <real> (((<double> q[i]) - zero_point) * scale)
