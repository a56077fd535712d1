import numpy as np
import pytest

from spsr import ops, tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_sps(rng, h=None, w=None, f=None, n_active=None):
    """Random SPS tensor built through from_dense (grid <= 16x16, F <= 8)."""
    h = h or int(rng.integers(1, 17))
    w = w or int(rng.integers(1, 17))
    f = f or int(rng.integers(1, 9))
    dense = tensor.DenseTensor(rng.standard_normal((f, h, w)))
    cells = [(y, x) for y in range(h) for x in range(w)]
    if n_active is None:
        n_active = int(rng.integers(0, h * w + 1))
    chosen = [cells[i] for i in rng.permutation(h * w)[:n_active]]
    return dense, tensor.from_dense(dense, chosen)


def identity_transform(f):
    return ops.LinearTransform(weights=np.eye(f), bias=np.zeros(f))


def random_linear(rng, f_in, f_out, activation="none"):
    return ops.LinearTransform(weights=rng.standard_normal((f_out, f_in)),
                               bias=rng.standard_normal(f_out), activation=activation)


def random_kernel(rng, f, k=3, dilation=1):
    return ops.ConvKernel(weights=rng.standard_normal((f, f, k, k)),
                          bias=rng.standard_normal(f), dilation=dilation)
