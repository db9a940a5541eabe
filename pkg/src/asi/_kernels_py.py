"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and results; used when the extension is not built or when
``ASI_PURE_PYTHON=1`` is set.
"""
import numpy as np


def im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, ho, wo, c, kh, kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(b * ho * wo, c * kh * kw)


def col2im(cols, b, c, h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


def mgs(q, start, tol):
    n = q.shape[1]
    for j in range(start, n):
        v = q[:, j]
        for _ in range(2):
            for k in range(j):
                v -= (q[:, k] @ v) * q[:, k]
        norm = np.sqrt(v @ v)
        if norm < tol:
            return j
        v /= norm
    return -1
