import numpy as np
import pytest

from asi.verify import decaying_tensor, numeric_grad, rel_err  # noqa: F401


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def separable_tensor(rng, shape):
    vs = [rng.standard_normal(d) for d in shape]
    return np.einsum("a,b,c,d->abcd", *vs), vs
