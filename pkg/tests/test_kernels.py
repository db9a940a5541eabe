import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asi import kernels

IMPLS = kernels.backends()


def cases():
    return st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 7), st.integers(1, 7),
                     st.sampled_from([1, 2, 3]), st.integers(1, 2), st.integers(0, 2),
                     st.integers(0, 2**32 - 1)).filter(
        lambda c: c[2] + 2 * c[6] >= c[4] and c[3] + 2 * c[6] >= c[4])


def loop_im2col(x, k, stride, pad):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    rows = []
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                rows.append(xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k].ravel())
    return np.array(rows)


@pytest.mark.parametrize("name", sorted(IMPLS))
@settings(max_examples=40, deadline=None)
@given(case=cases())
def test_im2col_matches_loops(name, case):
    b, c, h, w, k, s, p, seed = case
    x = np.random.default_rng(seed).standard_normal((b, c, h, w))
    got = kernels.im2col(x, k, k, s, p, impl=IMPLS[name])
    np.testing.assert_array_equal(got, loop_im2col(x, k, s, p))


@pytest.mark.parametrize("name", sorted(IMPLS))
@settings(max_examples=40, deadline=None)
@given(case=cases())
def test_col2im_is_adjoint(name, case):
    b, c, h, w, k, s, p, seed = case
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, c, h, w))
    cols = kernels.im2col(x, k, k, s, p, impl=IMPLS[name])
    y = rng.standard_normal(cols.shape)
    back = kernels.col2im(y, x.shape, k, k, s, p, impl=IMPLS[name])
    assert abs(np.sum(cols * y) - np.sum(x * back)) < 1e-9 * max(1.0, np.abs(cols * y).sum())


@pytest.mark.skipif(len(IMPLS) < 2, reason="compiled extension not built")
@settings(max_examples=40, deadline=None)
@given(case=cases())
def test_backends_agree(case):
    b, c, h, w, k, s, p, seed = case
    x = np.random.default_rng(seed).standard_normal((b, c, h, w))
    a = kernels.im2col(x, k, k, s, p, impl=IMPLS["cython"])
    assert np.array_equal(a, kernels.im2col(x, k, k, s, p, impl=IMPLS["python"]))
    da = kernels.col2im(a, x.shape, k, k, s, p, impl=IMPLS["cython"])
    db = kernels.col2im(a, x.shape, k, k, s, p, impl=IMPLS["python"])
    np.testing.assert_allclose(da, db, rtol=0, atol=1e-12)


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_mgs_orthonormalizes_and_flags_degenerate(name):
    rng = np.random.default_rng(0)
    q = rng.standard_normal((6, 3))
    assert kernels.mgs(q, 0, 1e-10, impl=IMPLS[name]) == -1
    assert np.max(np.abs(q.T @ q - np.eye(3))) < 1e-12
    d = rng.standard_normal((5, 3))
    d[:, 2] = d[:, 0] + d[:, 1]
    assert kernels.mgs(d, 0, 1e-10, impl=IMPLS[name]) == 2


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_mgs_start_keeps_leading_columns(name):
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.standard_normal((6, 2)))
    m = np.concatenate([q, rng.standard_normal((6, 2))], axis=1)
    head = m[:, :2].copy()
    kernels.mgs(m, 2, 1e-10, impl=IMPLS[name])
    assert np.array_equal(m[:, :2], head)
    assert np.max(np.abs(m.T @ m - np.eye(4))) < 1e-12


def test_pure_python_switch():
    env = {**os.environ, "ASI_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "import asi; print(asi.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_default_backend_is_compiled_when_built():
    assert kernels.BACKEND == ("cython" if "cython" in IMPLS else "python")
