"""Tucker compression of activation maps.

Two ways to get the factors:

* HOSVD: per-mode exact SVD of the unfoldings, truncated either by an
  explained-variance threshold or by fixed ranks.
* ASI: one warm-started subspace-iteration step per mode. The factors of
  the previous call are carried in a :class:`WarmStartCache`.
"""
import logging
import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .tensor import (
    Shape4,
    left_spectrum,
    mode_product,
    orthogonalize_report,
    rank_for_variance,
    storage_dtype,
    unfold,
)

log = logging.getLogger(__name__)


class RankVector(NamedTuple):
    r1: int
    r2: int
    r3: int
    r4: int


def unfolding_dims(shape):
    """(rows, cols) of each mode's unfolding."""
    n = math.prod(shape)
    return [(d, n // d) for d in shape]


def max_ranks(shape):
    return RankVector(*(min(a, b) for a, b in unfolding_dims(shape)))


def check_ranks(r, shape):
    r = RankVector(*(int(x) for x in r))
    for m, (x, (a, b)) in enumerate(zip(r, unfolding_dims(shape)), start=1):
        if not 1 <= x <= min(a, b):
            raise ValueError(
                f"rank {x} for mode {m} out of range 1..{min(a, b)} for shape {tuple(shape)}"
            )
    return r


def stored_elements(r, s):
    """Elements kept by a Tucker representation: core plus the four factors."""
    r = RankVector(*r)
    s = Shape4(*s)
    return math.prod(r) + sum(d * x for d, x in zip(s, r))


@dataclass(frozen=True)
class TuckerFactors:
    """Core tensor plus one orthonormal factor per mode.

    The approximated tensor is ``core ×1 U1 ×2 U2 ×3 U3 ×4 U4``.
    """

    core: np.ndarray
    factors: tuple
    source_shape: Shape4

    @property
    def ranks(self):
        return RankVector(*self.core.shape)

    @property
    def stored_elements(self):
        """Actual number of array elements held."""
        return int(self.core.size + sum(u.size for u in self.factors))

    def astype(self, dtype):
        return TuckerFactors(
            self.core.astype(dtype),
            tuple(u.astype(dtype) for u in self.factors),
            self.source_shape,
        )


@dataclass(frozen=True)
class WarmStartCache:
    """Factors from the previous compression of one layer.

    ``factors`` is None before the first call (step 0).
    """

    factors: Optional[tuple] = None
    step: int = 0


def _project_core(t, factors):
    core = np.asarray(t, dtype=np.float64)
    for m, u in enumerate(factors, start=1):
        core = mode_product(core, np.asarray(u, dtype=np.float64).T, m)
    return core


def _finish(t, core, factors):
    dt = storage_dtype(t)
    return TuckerFactors(
        core.astype(dt), tuple(u.astype(dt) for u in factors), Shape4.of(t.shape)
    )


def hosvd_variance(t, eps):
    """HOSVD truncated per mode to keep an ``eps`` share of singular energy.

    Returns:
        (TuckerFactors, RankVector)
    """
    t = np.asarray(t)
    Shape4.of(t.shape)
    if not np.any(t):
        warnings.warn("all-zero activation; falling back to rank-1 factors",
                      RuntimeWarning, stacklevel=2)
    factors, ranks = [], []
    for m in range(1, 5):
        u, s = left_spectrum(unfold(t, m))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            r = rank_for_variance(s, eps)
        factors.append(u[:, :r])
        ranks.append(r)
    return _finish(t, _project_core(t, factors), factors), RankVector(*ranks)


def hosvd_fixed(t, r):
    """HOSVD truncated to the given per-mode ranks."""
    t = np.asarray(t)
    r = check_ranks(r, Shape4.of(t.shape))
    factors = [left_spectrum(unfold(t, m))[0][:, :rm] for m, rm in enumerate(r, start=1)]
    return _finish(t, _project_core(t, factors), factors)


def reconstruct(f):
    """Dense tensor ``core ×1 U1 ×2 U2 ×3 U3 ×4 U4``."""
    if len(f.factors) != 4 or f.core.ndim != 4:
        raise ValueError("TuckerFactors needs a 4-mode core and four factors")
    out = np.asarray(f.core, dtype=np.float64)
    for m, u in enumerate(f.factors, start=1):
        out = mode_product(out, u, m)
    if out.shape != tuple(f.source_shape):
        raise ValueError(f"reconstruction shape {out.shape} != source {tuple(f.source_shape)}")
    return out.astype(storage_dtype(f.core))


def _cache_matches(cache, shape, r):
    if cache is None or cache.factors is None:
        return False
    return all(
        u.shape == (d, rm) for u, d, rm in zip(cache.factors, shape, r)
    ) and len(cache.factors) == 4


def asi_compress(t, r, cache=None, rng_seed=0):
    """Compress ``t`` with one subspace-iteration step per mode.

    Without a usable cache, each mode starts from a standard normal
    ``V`` drawn from a stream keyed by ``(rng_seed, mode)``. With one,
    ``V = A_mᵀ U_m`` where ``U_m`` is the cached factor from the previous
    call. ``U_m = orth(A_m V)`` and the core is projected mode by mode.

    A cache whose factor shapes do not fit ``t`` and ``r`` is dropped
    (logged as a warning) and the call cold-starts.

    Returns:
        (TuckerFactors, WarmStartCache) -- the new cache holds this call's
        factors and an incremented step counter.
    """
    t = np.asarray(t)
    shape = Shape4.of(t.shape)
    r = check_ranks(r, shape)
    warm = _cache_matches(cache, shape, r)
    if cache is not None and cache.factors is not None and not warm:
        log.warning("asi_compress: cached factors do not match shape %s ranks %s; "
                    "cold start", tuple(shape), tuple(r))
    t64 = np.asarray(t, dtype=np.float64)
    core = t64
    factors = []
    for m in range(1, 5):
        a = unfold(t64, m)
        rng = np.random.default_rng([int(rng_seed) & 0xFFFFFFFFFFFFFFFF, m])
        if warm:
            v = a.T @ np.asarray(cache.factors[m - 1], dtype=np.float64)
        else:
            v = rng.standard_normal((a.shape[1], r[m - 1]))
        u, redrawn = orthogonalize_report(a @ v, rng=rng)
        if redrawn:
            log.debug("asi_compress: mode %d re-drew columns %s", m, redrawn)
        factors.append(u)
        core = mode_product(core, u.T, m)
    out = _finish(t, core, factors)
    step = cache.step + 1 if cache is not None and warm else 1
    return out, WarmStartCache(out.factors, step)
