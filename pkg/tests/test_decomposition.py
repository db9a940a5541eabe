import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asi.decomposition import (
    RankVector,
    TuckerFactors,
    WarmStartCache,
    asi_compress,
    hosvd_fixed,
    hosvd_variance,
    max_ranks,
    reconstruct,
    stored_elements,
)
from asi.tensor import Shape4, mode_product, truncated_svd, unfold
from conftest import decaying_tensor, separable_tensor


def max_ortho_error(f):
    return max(np.max(np.abs(u.T @ u - np.eye(u.shape[1]))) for u in f.factors)


def mode_tail_energy(t, m, r):
    """Discarded squared singular values of the mode-m unfolding (numpy SVD oracle)."""
    s = np.linalg.svd(unfold(t, m), compute_uv=False)
    return float(np.sum(s[r:] ** 2)), float(np.sum(s ** 2))


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# HOSVD, variance-truncated

def test_hosvd_variance_separable(rng):
    t, _ = separable_tensor(rng, (3, 4, 5, 6))
    for eps in (0.3, 0.8, 1.0):
        f, r = hosvd_variance(t, eps)
        assert r == (1, 1, 1, 1) or eps == 1.0
        assert np.linalg.norm(reconstruct(f) - t) < 1e-6


def test_hosvd_variance_lossless(rng):
    t = rng.standard_normal((2, 3, 4, 5))
    f, r = hosvd_variance(t, 1.0)
    assert r == max_ranks(t.shape)
    assert rel(reconstruct(f), t) < 1e-5


def test_hosvd_variance_energy_and_bound(rng):
    t = rng.standard_normal((4, 4, 4, 4))
    f, r = hosvd_variance(t, 0.8)
    bound = 0.0
    for m in range(1, 5):
        tail, total = mode_tail_energy(t, m, r[m - 1])
        assert (total - tail) / total >= 0.8 - 1e-12
        bound += tail
    assert np.sum((reconstruct(f) - t) ** 2) <= bound + 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.floats(0.05, 1.0),
       shape=st.tuples(*[st.integers(1, 6)] * 4))
def test_hosvd_truncation_bound_property(seed, eps, shape):
    t = np.random.default_rng(seed).standard_normal(shape)
    f, r = hosvd_variance(t, eps)
    bound = sum(mode_tail_energy(t, m, r[m - 1])[0] for m in range(1, 5))
    assert np.sum((reconstruct(f) - t) ** 2) <= bound * (1 + 1e-9) + 1e-10
    assert max_ortho_error(f) < 1e-5
    assert f.stored_elements == stored_elements(r, t.shape)


def test_hosvd_variance_zero_tensor_warns():
    with pytest.warns(RuntimeWarning):
        f, r = hosvd_variance(np.zeros((2, 3, 4, 5)), 0.9)
    assert r == (1, 1, 1, 1)
    assert not np.any(reconstruct(f))


# HOSVD, fixed ranks

def test_hosvd_fixed_full_rank_lossless(rng):
    t = rng.standard_normal((3, 4, 5, 2))
    f = hosvd_fixed(t, max_ranks(t.shape))
    assert rel(reconstruct(f), t) < 1e-5


def test_hosvd_fixed_rank_one_separable(rng):
    t, _ = separable_tensor(rng, (2, 3, 4, 5))
    assert np.linalg.norm(reconstruct(hosvd_fixed(t, (1, 1, 1, 1))) - t) < 1e-10


def test_hosvd_fixed_matches_sequential_svd_oracle(rng):
    t = rng.standard_normal((4, 5, 6, 7))
    f = hosvd_fixed(t, (2, 2, 2, 2))
    core = t
    for m in range(1, 5):
        u, _, _ = truncated_svd(unfold(t, m), 2)
        core = mode_product(core, u.T, m)
    assert abs(np.sum(f.core ** 2) - np.sum(core ** 2)) < 1e-8


def test_hosvd_fixed_rank_out_of_range():
    with pytest.raises(ValueError):
        hosvd_fixed(np.ones((2, 3, 4, 5)), (3, 1, 1, 1))


# reconstruct

def test_reconstruct_zero_core(rng):
    factors = tuple(np.linalg.qr(rng.standard_normal((d, 2)))[0] for d in (3, 4, 5, 6))
    f = TuckerFactors(np.zeros((2, 2, 2, 2)), factors, Shape4(3, 4, 5, 6))
    assert not np.any(reconstruct(f))


def test_reconstruct_preserves_norm(rng):
    factors = tuple(np.linalg.qr(rng.standard_normal((d, r)))[0]
                    for d, r in zip((3, 4, 5, 6), (2, 3, 1, 4)))
    core = rng.standard_normal((2, 3, 1, 4))
    f = TuckerFactors(core, factors, Shape4(3, 4, 5, 6))
    assert abs(np.linalg.norm(reconstruct(f)) - np.linalg.norm(core)) < 1e-8


def test_reconstruct_shape_mismatch(rng):
    f = hosvd_fixed(rng.standard_normal((2, 3, 4, 5)), (1, 1, 1, 1))
    bad = TuckerFactors(f.core, f.factors, Shape4(2, 3, 4, 6))
    with pytest.raises(ValueError):
        reconstruct(bad)


# ASI

def captured_per_mode(t, f):
    return [float(np.sum((f.factors[m].T @ unfold(t, m + 1)) ** 2)) for m in range(4)]


def test_asi_full_rank_cold_start_is_lossless(rng):
    t = rng.standard_normal((3, 4, 5, 6))
    f, cache = asi_compress(t, max_ranks(t.shape), None, rng_seed=3)
    assert rel(reconstruct(f), t) < 1e-4
    assert cache.step == 1 and len(cache.factors) == 4


def test_asi_converges_to_hosvd_energy():
    t = decaying_tensor(0)
    target = np.sum(hosvd_fixed(t, (2, 2, 2, 2)).core ** 2)
    cache = None
    for _ in range(20):
        f, cache = asi_compress(t, (2, 2, 2, 2), cache, rng_seed=0)
    assert abs(np.sum(f.core ** 2) - target) / target < 0.01
    assert cache.step == 20


def test_asi_per_mode_energy_nondecreasing():
    for seed in range(10):
        t = np.random.default_rng(seed).standard_normal((4, 4, 8, 8))
        cache, prev = None, None
        for _ in range(15):
            f, cache = asi_compress(t, (2, 2, 2, 2), cache, rng_seed=seed)
            cur = captured_per_mode(t, f)
            if prev is not None:
                assert all(c >= p - 1e-8 * p for c, p in zip(cur, prev))
            prev = cur


def test_asi_core_energy_is_not_monotone_in_general():
    # The multi-mode core norm can overshoot the HOSVD value and come back
    # down, even though every mode's captured energy is monotone.
    t = np.random.default_rng(0).standard_normal((4, 4, 8, 8))
    cache, energies = None, []
    for _ in range(40):
        f, cache = asi_compress(t, (2, 2, 2, 2), cache, rng_seed=0)
        energies.append(float(np.sum(f.core ** 2)))
    assert np.min(np.diff(energies)) < -1e-3


def test_asi_warm_start_beats_cold_on_drift(rng):
    t0 = decaying_tensor(7, shape=(6, 5, 8, 8), decay=0.7)
    delta = np.random.default_rng(8).standard_normal(t0.shape)
    warm_err, cold_err, cache = [], [], None
    for k in range(20):
        t = t0 + k * 0.01 * delta
        fw, cache = asi_compress(t, (2, 2, 3, 3), cache, rng_seed=1)
        fc, _ = asi_compress(t, (2, 2, 3, 3), None, rng_seed=100 + k)
        warm_err.append(rel(reconstruct(fw), t))
        cold_err.append(rel(reconstruct(fc), t))
    assert np.mean(warm_err) < np.mean(cold_err)


def test_asi_deterministic(rng):
    t = rng.standard_normal((3, 4, 5, 6)).astype(np.float32)
    a, ca = asi_compress(t, (2, 2, 2, 2), None, rng_seed=11)
    b, cb = asi_compress(t, (2, 2, 2, 2), None, rng_seed=11)
    assert np.array_equal(a.core, b.core)
    assert all(np.array_equal(x, y) for x, y in zip(ca.factors, cb.factors))
    a2, _ = asi_compress(t, (2, 2, 2, 2), ca, rng_seed=11)
    b2, _ = asi_compress(t, (2, 2, 2, 2), cb, rng_seed=11)
    assert np.array_equal(a2.core, b2.core)
    c, _ = asi_compress(t, (2, 2, 2, 2), None, rng_seed=12)
    assert not np.array_equal(a.core, c.core)


def test_asi_cache_shape_mismatch_falls_back(rng, caplog):
    t = rng.standard_normal((3, 4, 5, 6))
    _, cache = asi_compress(t, (2, 2, 2, 2), None, rng_seed=0)
    with caplog.at_level(logging.WARNING, logger="asi.decomposition"):
        f, new = asi_compress(rng.standard_normal((2, 4, 5, 6)), (2, 2, 2, 2), cache, 0)
    assert "cold start" in caplog.text
    assert new.step == 1
    assert f.source_shape == (2, 4, 5, 6)


def test_asi_orthonormal_and_storage(rng):
    t = np.maximum(rng.standard_normal((8, 6, 7, 7)), 0).astype(np.float32)
    cache = None
    for _ in range(3):
        f, cache = asi_compress(t, (3, 2, 4, 4), cache, rng_seed=5)
        assert max_ortho_error(f) < 1e-5
        assert f.stored_elements == stored_elements(f.ranks, t.shape)
        assert f.core.dtype == np.float32


def test_asi_rejects_bad_ranks():
    with pytest.raises(ValueError):
        asi_compress(np.ones((2, 3, 4, 5)), (1, 1, 1, 0))


# storage accounting

def test_stored_elements_examples():
    assert stored_elements((1, 1, 1, 1), (2, 3, 4, 5)) == 15
    assert stored_elements((1, 1, 1, 1), (1, 1, 1, 1)) == 5
    for n in (2, 3, 5):
        assert stored_elements((n,) * 4, (n,) * 4) == n ** 4 + 4 * n ** 2


@settings(max_examples=40, deadline=None)
@given(shape=st.tuples(*[st.integers(1, 6)] * 4), data=st.data())
def test_stored_elements_is_structural(shape, data):
    r = RankVector(*(data.draw(st.integers(1, m)) for m in max_ranks(shape)))
    f = hosvd_fixed(np.random.default_rng(0).standard_normal(shape), r)
    assert f.stored_elements == stored_elements(r, shape)


def test_warm_start_cache_defaults():
    c = WarmStartCache()
    assert c.factors is None and c.step == 0
