"""Dense 4-mode tensor and matrix primitives.

Tensors are plain numpy arrays. Modes are numbered 1..4 in the
(batch, channels, height, width) order used throughout the package.
All contractions accumulate in float64; results keep the input's storage
precision (float32 in, float32 out; float64 in, float64 out).
"""
import logging
import math
import warnings
from typing import NamedTuple

import numpy as np

from . import kernels

log = logging.getLogger(__name__)


class Shape4(NamedTuple):
    """Extents of a (batch, channels, height, width) tensor."""

    b: int
    c: int
    h: int
    w: int

    @classmethod
    def of(cls, shape):
        if len(shape) != 4:
            raise ValueError(f"expected a 4-mode shape, got {tuple(shape)}")
        s = cls(*(int(d) for d in shape))
        if min(s) < 1:
            raise ValueError(f"all extents must be >= 1, got {tuple(s)}")
        return s

    @property
    def size(self):
        return self.b * self.c * self.h * self.w


def storage_dtype(*arrays):
    """Result dtype for tensor ops: float64 if any input is float64, else float32."""
    dt = np.result_type(*arrays, np.float32)
    return np.float64 if dt == np.float64 else np.float32


def _check_mode(mode, ndim=4):
    if not isinstance(mode, (int, np.integer)) or not 1 <= mode <= ndim:
        raise ValueError(f"mode must be an integer in 1..{ndim}, got {mode!r}")
    return int(mode)


def unfold(t, mode):
    """Mode-``mode`` matricization.

    Rows index the chosen mode; columns run over the remaining modes in
    ascending order with the last index fastest. :func:`fold` inverts it.

    >>> unfold(np.zeros((2, 3, 4, 5)), 1).shape
    (2, 60)
    """
    t = np.asarray(t)
    mode = _check_mode(mode, t.ndim)
    return np.moveaxis(t, mode - 1, 0).reshape(t.shape[mode - 1], -1)


def fold(m, mode, shape):
    """Inverse of :func:`unfold` for a tensor of the given ``shape``."""
    m = np.asarray(m)
    shape = tuple(int(d) for d in shape)
    mode = _check_mode(mode, len(shape))
    rest = shape[: mode - 1] + shape[mode:]
    if m.ndim != 2 or m.shape != (shape[mode - 1], math.prod(rest)):
        raise ValueError(
            f"matrix of shape {m.shape} cannot be folded along mode {mode} into {shape}"
        )
    return np.moveaxis(m.reshape((shape[mode - 1],) + rest), 0, mode - 1)


def mode_product(t, m, mode):
    """``t ×_mode m``: contract mode ``mode`` of ``t`` with the columns of ``m``.

    ``m`` is Q x P where P is the extent of ``mode``; the result has that
    extent replaced by Q. Works for tensors of any order.
    """
    t = np.asarray(t)
    m = np.asarray(m)
    mode = _check_mode(mode, t.ndim)
    if m.ndim != 2 or m.shape[1] != t.shape[mode - 1]:
        raise ValueError(
            f"matrix {m.shape} does not match extent {t.shape[mode - 1]} of mode {mode}"
        )
    out = np.tensordot(m.astype(np.float64), t.astype(np.float64), axes=(1, mode - 1))
    return np.moveaxis(out, 0, mode - 1).astype(storage_dtype(t, m))


def orthogonalize_report(m, tol=1e-10, rng=None, impl=None):
    """Orthonormalize the columns of ``m`` by modified Gram-Schmidt.

    A column whose residual norm falls below ``tol`` (scaled by the largest
    input column norm when that exceeds 1) is replaced with a standard
    normal draw from ``rng`` and re-orthogonalized.

    Returns:
        (q, redrawn): the orthonormal a x r matrix and the list of column
        indices that were re-drawn.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] < m.shape[1]:
        raise ValueError(f"need a tall matrix (rows >= cols), got {m.shape}")
    q = np.array(m, dtype=np.float64, order="C", copy=True)
    if not np.all(np.isfinite(q)):
        raise ValueError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.linalg.norm(q, axis=0), initial=0.0)))
    rng = np.random.default_rng(0) if rng is None else rng
    redrawn = []
    start = 0
    while True:
        j = kernels.mgs(q, start, tol * scale, impl=impl)
        if j < 0:
            break
        redrawn.append(j)
        q[:, j] = rng.standard_normal(q.shape[0])
        scale = max(scale, float(np.linalg.norm(q[:, j])))
        start = j
    return q.astype(storage_dtype(m)), redrawn


def orthogonalize(m, tol=1e-10, rng=None):
    """Like :func:`orthogonalize_report` but returns only the matrix."""
    q, redrawn = orthogonalize_report(m, tol=tol, rng=rng)
    if redrawn:
        log.debug("orthogonalize: re-drew rank-deficient columns %s", redrawn)
    return q


def truncated_svd(m, r):
    """Rank-``r`` SVD: ``(U, s, V)`` with ``U @ diag(s) @ V.T`` the best approximation."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("truncated_svd expects a matrix")
    if not 1 <= r <= min(m.shape):
        raise ValueError(f"rank {r} out of range 1..{min(m.shape)}")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return u[:, :r], s[:r], vt[:r].T


def left_spectrum(m):
    """All left singular vectors and singular values of ``m``, descending.

    Short-and-wide matrices go through the eigendecomposition of the small
    Gram matrix ``m @ m.T``; otherwise a thin SVD is used.
    """
    m = np.asarray(m, dtype=np.float64)
    a, b = m.shape
    if 4 * a <= b:
        evals, evecs = np.linalg.eigh(m @ m.T)
        order = np.argsort(evals)[::-1]
        s = np.sqrt(np.clip(evals[order], 0.0, None))
        return evecs[:, order], s
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    return u, s


def rank_for_variance(s, eps):
    """Smallest rank whose leading singular values keep an ``eps`` share of the energy.

    ``eps = 1`` returns the position of the last strictly positive value.
    An all-zero spectrum yields 1 with a ``RuntimeWarning``.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("spectrum must be a non-empty vector")
    if not 0.0 < eps <= 1.0:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    energy = s * s
    total = energy.sum()
    if total <= 0.0:
        warnings.warn("all-zero spectrum (degenerate activation); using rank 1",
                      RuntimeWarning, stacklevel=2)
        return 1
    if eps >= 1.0:
        return int(np.flatnonzero(energy > 0.0)[-1]) + 1
    cum = np.cumsum(energy)
    r = int(np.searchsorted(cum, eps * total * (1.0 - 1e-12), side="left")) + 1
    return min(max(r, 1), s.size)
