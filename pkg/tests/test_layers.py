import numpy as np
import pytest

from asi import layers as L
from asi import macs
from asi.cost import LayerCostInputs, flops_asi_backward, flops_vanilla
from asi.decomposition import TuckerFactors, hosvd_fixed, max_ranks, reconstruct
from asi.layers import ConvSpec
from asi.tensor import Shape4
from conftest import numeric_grad, rel_err, separable_tensor


def conv_loops(x, w, stride, pad):
    """Direct nested-loop cross-correlation."""
    b, c, h, wd = x.shape
    co, _, d, _ = w.shape
    ho = (h + 2 * pad - d) // stride + 1
    wo = (wd + 2 * pad - d) // stride + 1
    out = np.zeros((b, co, ho, wo))
    for n in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(d):
                            for kj in range(d):
                                y, z = i * stride + ki - pad, j * stride + kj - pad
                                if 0 <= y < h and 0 <= z < wd:
                                    acc += x[n, ci, y, z] * w[o, ci, ki, kj]
                    out[n, o, i, j] = acc
    return out


def random_factors(rng, shape, ranks):
    factors = tuple(np.linalg.qr(rng.standard_normal((d, r)))[0] for d, r in zip(shape, ranks))
    return TuckerFactors(rng.standard_normal(ranks), factors, Shape4(*shape))


# forward

def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_allclose(L.conv_forward(x, w, ConvSpec(3, 3, 1)), x, atol=1e-14)


def test_conv_zero_input():
    out = L.conv_forward(np.zeros((1, 2, 5, 5)), np.ones((3, 2, 3, 3)), ConvSpec(2, 3, 3, 1, 1))
    assert out.shape == (1, 3, 5, 5) and not np.any(out)


@pytest.mark.parametrize("stride,pad,shape", [
    (1, 0, (1, 1, 5, 5)), (1, 1, (1, 1, 5, 5)), (2, 1, (2, 3, 7, 6)), (1, 2, (1, 2, 4, 4)),
])
def test_conv_matches_loops(rng, stride, pad, shape):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((2, shape[1], 3, 3))
    out = L.conv_forward(x, w, ConvSpec(shape[1], 2, 3, stride, pad))
    assert rel_err(out, conv_loops(x, w, stride, pad)) < 1e-6


def test_conv_bias_and_dtype(rng):
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    out = L.conv_forward(x, w, ConvSpec(2, 3, 3, 1, 1), bias=np.array([1.0, 2.0, 3.0]))
    assert out.dtype == np.float32
    ref = L.conv_forward(x, w, ConvSpec(2, 3, 3, 1, 1)) + np.array([1, 2, 3])[None, :, None, None]
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_conv_shape_errors(rng):
    with pytest.raises(ValueError):
        L.conv_forward(np.ones((1, 2, 4, 4)), np.ones((3, 3, 3, 3)), ConvSpec(3, 3, 3))
    with pytest.raises(ValueError):
        L.conv_forward(np.ones((1, 2, 2, 2)), np.ones((3, 2, 3, 3)), ConvSpec(2, 3, 3))
    with pytest.raises(ValueError):
        ConvSpec(2, 3, 0)


# backward: weight

def test_weight_grad_zero(rng):
    spec = ConvSpec(2, 3, 3, 1, 1)
    g = L.conv_backward_weight(rng.standard_normal((2, 2, 5, 5)), np.zeros((2, 3, 5, 5)), spec)
    assert g.shape == spec.weight_shape and not np.any(g)


def test_weight_grad_single_pixel_is_input_patch(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    spec = ConvSpec(2, 3, 3)
    g = np.zeros((1, 3, 4, 4))
    g[0, 1, 2, 1] = 1.0
    dw = L.conv_backward_weight(x, g, spec)
    np.testing.assert_allclose(dw[1], x[0, :, 2:5, 1:4], atol=1e-14)
    assert not np.any(dw[[0, 2]])


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_weight_grad_finite_differences(rng, stride, pad):
    spec = ConvSpec(2, 3, 3, stride, pad)
    x = rng.standard_normal((2, 2, 5, 6))
    w = rng.standard_normal(spec.weight_shape)
    proj = rng.standard_normal(spec.out_shape(x.shape))
    num = numeric_grad(lambda ww: np.sum(L.conv_forward(x, ww, spec) * proj), w)
    assert rel_err(L.conv_backward_weight(x, proj, spec), num) < 1e-3


# backward: input

def test_input_grad_identity_kernel(rng):
    g = rng.standard_normal((2, 3, 4, 5))
    dx = L.conv_backward_input(np.eye(3).reshape(3, 3, 1, 1), g, ConvSpec(3, 3, 1), g.shape)
    np.testing.assert_allclose(dx, g, atol=1e-14)


def test_input_grad_zero_kernel(rng):
    spec = ConvSpec(2, 3, 3, 1, 1)
    dx = L.conv_backward_input(np.zeros(spec.weight_shape), rng.standard_normal((1, 3, 4, 4)),
                               spec, (1, 2, 4, 4))
    assert dx.shape == (1, 2, 4, 4) and not np.any(dx)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_input_grad_finite_differences(rng, stride, pad):
    spec = ConvSpec(2, 3, 3, stride, pad)
    x = rng.standard_normal((2, 2, 5, 6))
    w = rng.standard_normal(spec.weight_shape)
    proj = rng.standard_normal(spec.out_shape(x.shape))
    num = numeric_grad(lambda xx: np.sum(L.conv_forward(xx, w, spec) * proj), x)
    assert rel_err(L.conv_backward_input(w, proj, spec, x.shape), num) < 1e-3


# backward: low-rank weight gradient

def test_lowrank_full_rank_equals_dense(rng):
    spec = ConvSpec(3, 4, 3, 1, 1)
    x = rng.standard_normal((2, 3, 6, 5))
    g = rng.standard_normal(spec.out_shape(x.shape))
    f = hosvd_fixed(x, max_ranks(x.shape))
    assert rel_err(L.conv_backward_weight_lowrank(f, g, spec),
                   L.conv_backward_weight(x, g, spec)) < 1e-5


def test_lowrank_separable_rank_one(rng):
    spec = ConvSpec(3, 2, 3, 1, 1)
    x, _ = separable_tensor(rng, (2, 3, 5, 5))
    g = rng.standard_normal(spec.out_shape(x.shape))
    f = hosvd_fixed(x, (1, 1, 1, 1))
    oracle = L.conv_backward_weight(reconstruct(f), g, spec)
    assert rel_err(L.conv_backward_weight_lowrank(f, g, spec), oracle) < 1e-5


@pytest.mark.parametrize("seed", range(8))
def test_lowrank_matches_reconstruct_then_dense(seed):
    rng = np.random.default_rng(seed)
    b, c, h, w = rng.integers(1, 6, size=4) + np.array([0, 0, 2, 2])
    d = int(rng.choice([1, 3]))
    spec = ConvSpec(int(c), int(rng.integers(1, 5)), d, 1, d // 2)
    shape = (int(b), int(c), int(h), int(w))
    ranks = tuple(int(rng.integers(1, m + 1)) for m in max_ranks(shape))
    f = random_factors(rng, shape, ranks)
    g = rng.standard_normal(spec.out_shape(shape))
    oracle = L.conv_backward_weight(reconstruct(f), g, spec)
    with macs.counting() as counter:
        got = L.conv_backward_weight_lowrank(f, g, spec)
    assert rel_err(got, oracle) < 1e-5
    assert counter["conv_backward_weight_lowrank"] == flops_asi_backward(
        LayerCostInputs(shape, spec, ranks))


def test_lowrank_strided(rng):
    spec = ConvSpec(2, 3, 3, 2, 1)
    f = random_factors(rng, (3, 2, 7, 8), (2, 2, 3, 3))
    g = rng.standard_normal(spec.out_shape((3, 2, 7, 8)))
    oracle = L.conv_backward_weight(reconstruct(f), g, spec)
    assert rel_err(L.conv_backward_weight_lowrank(f, g, spec), oracle) < 1e-5


def test_lowrank_shape_mismatch(rng):
    f = random_factors(rng, (2, 3, 5, 5), (1, 1, 1, 1))
    with pytest.raises(ValueError):
        L.conv_backward_weight_lowrank(f, np.zeros((2, 4, 4, 4)), ConvSpec(3, 4, 3, 1, 1))


# counters

def test_counters_match_vanilla_formulas(rng):
    spec = ConvSpec(3, 4, 3, 1, 1)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal(spec.weight_shape)
    g = rng.standard_normal(spec.out_shape(x.shape))
    with macs.counting() as c:
        L.conv_forward(x, w, spec)
        L.conv_backward_weight(x, g, spec)
    fwd, bwd = flops_vanilla(LayerCostInputs(x.shape, spec, (1, 1, 1, 1)))
    assert fwd == 13824
    assert c["conv_forward"] == fwd and c["conv_backward_weight"] == bwd


def test_counting_off_by_default(rng):
    with macs.counting() as c:
        pass
    L.conv_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 1, 1)), ConvSpec(1, 1, 1))
    assert sum(c.values()) == 0


# fully connected

def test_fc_identity(rng):
    x = rng.standard_normal((4, 5))
    np.testing.assert_allclose(L.fc_forward(x, np.eye(5)), x, atol=1e-14)


def test_fc_finite_differences(rng):
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((3, 5))
    bias = rng.standard_normal(3)
    proj = rng.standard_normal((4, 3))
    dw, dx, db = L.fc_backward(x, w, proj)
    loss = lambda xx, ww, bb: np.sum(L.fc_forward(xx, ww, bb) * proj)
    assert rel_err(dw, numeric_grad(lambda ww: loss(x, ww, bias), w)) < 1e-3
    assert rel_err(dx, numeric_grad(lambda xx: loss(xx, w, bias), x)) < 1e-3
    assert rel_err(db, numeric_grad(lambda bb: loss(x, w, bb), bias)) < 1e-3


def test_fc_lowrank_full_rank(rng):
    x = rng.standard_normal((6, 4))
    g = rng.standard_normal((6, 3))
    dense = L.fc_backward(x, rng.standard_normal((3, 4)), g)[0]
    low = L.fc_backward_weight_lowrank(L.compress_matrix(x, 4), g)
    assert rel_err(low, dense) < 1e-5


def test_fc_shape_error():
    with pytest.raises(ValueError):
        L.fc_forward(np.ones((2, 3)), np.ones((4, 5)))


# ReLU

def test_relu_roundtrip(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    y, mask = L.relu_forward(x)
    assert np.all(y >= 0) and mask.dtype == bool
    g = rng.standard_normal(x.shape)
    np.testing.assert_array_equal(L.relu_backward(mask, g), np.where(x > 0, g, 0))


# SGD

def test_sgd_zero_grad_no_momentum():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = L.sgd_step(p, {"w": np.zeros(2)}, {}, lr=0.1)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_sgd_plain_step():
    new, _ = L.sgd_step({"w": np.array([1.0, 2.0])}, {"w": np.array([0.5, -1.0])}, {}, lr=1.0)
    np.testing.assert_allclose(new["w"], [0.5, 3.0])


def test_sgd_clip_halves_gradient():
    g = {"a": np.array([2.0, 0.0]), "b": np.array([0.0, 2.0 * np.sqrt(3.0)])}  # norm 4
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    new, _ = L.sgd_step(p, g, {}, lr=1.0, clip_l2=2.0)
    np.testing.assert_allclose(new["a"], [-1.0, 0.0])
    np.testing.assert_allclose(new["b"], [0.0, -np.sqrt(3.0)])


def test_sgd_momentum_and_decay():
    p = {"w": np.array([1.0])}
    g = {"w": np.array([1.0])}
    p1, b1 = L.sgd_step(p, g, {}, lr=0.1, momentum=0.9, weight_decay=0.5)
    np.testing.assert_allclose(b1["w"], [1.5])
    np.testing.assert_allclose(p1["w"], [0.85])
    p2, b2 = L.sgd_step(p1, g, b1, lr=0.1, momentum=0.9, weight_decay=0.5)
    np.testing.assert_allclose(b2["w"], [0.9 * 1.5 + 1.0 + 0.5 * 0.85])
    np.testing.assert_allclose(p2["w"], [0.85 - 0.1 * b2["w"][0]])


def test_sgd_rejects_bad_lr():
    with pytest.raises(ValueError):
        L.sgd_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, {}, lr=0.0)
