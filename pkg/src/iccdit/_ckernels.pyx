# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Serial compiled kernels. Double-precision accumulation, fixed loop order."""
import numpy as np
from libc.math cimport exp

BACKEND = "compiled"

cdef double MASK_VALUE = -1e9


def matmul(const double[:, ::1] a, const double[:, ::1] b, strict=False):
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double aip
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(m):
        for p in range(kk):
            aip = a[i, p]
            for j in range(n):
                o[i, j] += aip * b[p, j]
    return out


cdef void _softmax_inplace(double[:, ::1] s) noexcept nogil:
    cdef Py_ssize_t m = s.shape[0], n = s.shape[1], i, j
    cdef double mx, tot
    for i in range(m):
        if n == 0:
            continue
        mx = s[i, 0]
        for j in range(1, n):
            if s[i, j] > mx:
                mx = s[i, j]
        tot = 0.0
        for j in range(n):
            s[i, j] = exp(s[i, j] - mx)
            tot += s[i, j]
        for j in range(n):
            s[i, j] /= tot


def softmax_rows(const double[:, ::1] s):
    out = np.array(s, dtype=np.float64, copy=True)
    cdef double[:, ::1] o = out
    _softmax_inplace(o)
    return out


def attention(const double[:, ::1] q, const double[:, ::1] k, const double[:, ::1] v,
              double scale, Py_ssize_t mask_row0, Py_ssize_t mask_col1, strict=False):
    """Fused scores, row softmax and weighted sum. Returns (out, weights)."""
    cdef Py_ssize_t m = q.shape[0], n = k.shape[0], d = q.shape[1], dv = v.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double acc, pij
    weights = np.empty((m, n), dtype=np.float64)
    out = np.zeros((m, dv), dtype=np.float64)
    cdef double[:, ::1] w = weights
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(m):
            for j in range(n):
                if i >= mask_row0 and j < mask_col1:
                    w[i, j] = MASK_VALUE
                    continue
                acc = 0.0
                for p in range(d):
                    acc = acc + q[i, p] * k[j, p]
                w[i, j] = acc * scale
        _softmax_inplace(w)
        for i in range(m):
            for j in range(n):
                pij = w[i, j]
                for p in range(dv):
                    o[i, p] += pij * v[j, p]
    return out, weights
