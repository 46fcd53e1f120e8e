# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fixed-order kernels.

Every reduction runs strictly left to right over its index, one multiply and
one add per step, so a row's result never depends on how many other rows are
in the batch. ``_kernels_py`` implements the same arithmetic with numpy.
"""
import numpy as np

from libc.math cimport INFINITY, rint


def linear(const double[:, ::1] x, const double[:, ::1] w):
    cdef Py_ssize_t n = x.shape[0], din = x.shape[1], dout = w.shape[1]
    cdef Py_ssize_t r, j, c
    cdef double a
    out = np.empty((n, dout), dtype=np.float64)
    cdef double[:, ::1] o = out
    if din == 0:
        out[:] = 0.0
        return out
    for r in range(n):
        a = x[r, 0]
        for c in range(dout):
            o[r, c] = a * w[0, c]
        for j in range(1, din):
            a = x[r, j]
            for c in range(dout):
                o[r, c] = o[r, c] + a * w[j, c]
    return out


def masked_scores(const double[:, ::1] q, const double[:, ::1] k,
                  const unsigned char[:, ::1] mask, int n_heads, double scale):
    cdef Py_ssize_t nq = q.shape[0], nk = k.shape[0], width = q.shape[1]
    cdef Py_ssize_t dh = width // n_heads
    cdef Py_ssize_t h, i, j, d, base
    cdef double acc
    out = np.empty((n_heads, nq, nk), dtype=np.float64)
    cdef double[:, :, ::1] s = out
    for h in range(n_heads):
        base = h * dh
        for i in range(nq):
            for j in range(nk):
                if not mask[i, j]:
                    s[h, i, j] = -INFINITY
                    continue
                acc = q[i, base] * k[j, base]
                for d in range(1, dh):
                    acc = acc + q[i, base + d] * k[j, base + d]
                s[h, i, j] = acc * scale
    return out


def weighted_values(const double[:, :, ::1] e, const double[:, ::1] v,
                    const unsigned char[:, ::1] mask):
    cdef Py_ssize_t n_heads = e.shape[0], nq = e.shape[1], nk = e.shape[2]
    cdef Py_ssize_t width = v.shape[1]
    cdef Py_ssize_t dh = width // n_heads
    cdef Py_ssize_t h, i, j, d, base
    cdef double den, w
    out = np.zeros((nq, width), dtype=np.float64)
    cdef double[:, ::1] o = out
    for h in range(n_heads):
        base = h * dh
        for i in range(nq):
            den = 0.0
            for j in range(nk):
                if not mask[i, j]:
                    continue
                w = e[h, i, j]
                den = den + w
                for d in range(dh):
                    o[i, base + d] = o[i, base + d] + w * v[j, base + d]
            for d in range(dh):
                o[i, base + d] = o[i, base + d] / den
    return out


def quantize_groups(const double[:, ::1] groups, int bits):
    """Per-row min/max affine codes with round-half-even."""
    cdef Py_ssize_t ng = groups.shape[0], gs = groups.shape[1]
    cdef Py_ssize_t g, i
    cdef double lo, hi, sc, t, levels = (1 << bits) - 1
    codes = np.empty((ng, gs), dtype=np.uint8)
    scales = np.empty(ng, dtype=np.float64)
    zeros = np.empty(ng, dtype=np.float64)
    cdef unsigned char[:, ::1] cv = codes
    cdef double[::1] sv = scales
    cdef double[::1] zv = zeros
    for g in range(ng):
        lo = groups[g, 0]
        hi = groups[g, 0]
        for i in range(1, gs):
            t = groups[g, i]
            if t < lo:
                lo = t
            if t > hi:
                hi = t
        sc = (hi - lo) / levels
        if not sc > 0.0:
            sc = 1.0
        sv[g] = sc
        zv[g] = lo
        for i in range(gs):
            t = rint((groups[g, i] - lo) / sc)
            if t < 0.0:
                t = 0.0
            elif t > levels:
                t = levels
            cv[g, i] = <unsigned char>t
    return codes, scales, zeros


def dequantize_groups(const unsigned char[:, ::1] codes, const double[::1] scales,
                      const double[::1] zeros):
    cdef Py_ssize_t ng = codes.shape[0], gs = codes.shape[1]
    cdef Py_ssize_t g, i
    out = np.empty((ng, gs), dtype=np.float64)
    cdef double[:, ::1] o = out
    for g in range(ng):
        for i in range(gs):
            o[g, i] = <double>codes[g, i] * scales[g] + zeros[g]
    return out
