"""Backend selection for the hot loops.

The compiled extension ``asi._kernels`` is used when importable; otherwise,
or when the environment variable ``ASI_PURE_PYTHON`` is set to a non-empty
value other than ``0``, the numpy fallback is used. ``BACKEND`` records the
choice.
"""
import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("ASI_PURE_PYTHON", "0") in ("", "0"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def backends():
    """Return the available backend modules keyed by name."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def im2col(x, kh, kw, stride=1, pad=0, impl=None):
    """Unroll sliding ``kh x kw`` windows of a (B, C, H, W) array.

    Returns a float64 matrix with one row per output pixel, ordered
    (batch, out_row, out_col), and columns ordered (channel, ki, kj).
    Out-of-range (padded) positions hold zero.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    return (impl or _impl).im2col(x, kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride=1, pad=0, impl=None):
    """Adjoint of :func:`im2col`: scatter-add columns back into ``shape``."""
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    b, c, h, w = shape
    return (impl or _impl).col2im(cols, b, c, h, w, kh, kw, stride, pad)


def mgs(q, start, tol, impl=None):
    """Modified Gram-Schmidt with re-projection, in place on float64 ``q``.

    Returns the first rank-deficient column index, or -1.
    """
    return (impl or _impl).mgs(q, start, tol)
