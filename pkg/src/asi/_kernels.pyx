# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: im2col/col2im and modified Gram-Schmidt.

Everything works on C-contiguous float64 buffers; the Python-facing
wrappers in ``asi.kernels`` handle casting and validation.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b * ho * wo, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t n, ci, i, j, oy, ox, iy, ix, row, col
    for n in range(b):
        for oy in range(ho):
            for ox in range(wo):
                row = (n * ho + oy) * wo + ox
                for ci in range(c):
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        col = (ci * kh + i) * kw
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if ix >= 0 and ix < w:
                                cols[row, col + j] = x[n, ci, iy, ix]
    return out


def col2im(const double[:, ::1] cols, int b, int c, int h, int w,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] x = out
    cdef Py_ssize_t n, ci, i, j, oy, ox, iy, ix, row, col
    for n in range(b):
        for oy in range(ho):
            for ox in range(wo):
                row = (n * ho + oy) * wo + ox
                for ci in range(c):
                    for i in range(kh):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        col = (ci * kh + i) * kw
                        for j in range(kw):
                            ix = ox * stride + j - pad
                            if ix >= 0 and ix < w:
                                x[n, ci, iy, ix] += cols[row, col + j]
    return out


cdef double _project_out(double[:, ::1] q, Py_ssize_t k, Py_ssize_t j) nogil:
    # q[:, j] -= <q[:, k], q[:, j]> q[:, k]
    cdef Py_ssize_t i, m = q.shape[0]
    cdef double dot = 0.0
    for i in range(m):
        dot += q[i, k] * q[i, j]
    for i in range(m):
        q[i, j] -= dot * q[i, k]
    return dot


def mgs(double[:, ::1] q, Py_ssize_t start, double tol):
    """Orthonormalize columns ``start..`` of ``q`` in place.

    Returns the index of the first column whose residual norm drops below
    ``tol``, or -1 when every column was normalized.
    """
    cdef Py_ssize_t m = q.shape[0], n = q.shape[1]
    cdef Py_ssize_t i, j, k, sweep
    cdef double norm
    for j in range(start, n):
        for sweep in range(2):
            for k in range(j):
                _project_out(q, k, j)
        norm = 0.0
        for i in range(m):
            norm += q[i, j] * q[i, j]
        norm = sqrt(norm)
        if norm < tol:
            return j
        for i in range(m):
            q[i, j] /= norm
    return -1
