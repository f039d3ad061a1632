"""The compiled kernels and the numpy fallback must agree."""

import numpy as np
import pytest

from modtune import _kernels_py as py
from modtune import kernels

compiled = pytest.importorskip("modtune._kernels")

TOL = dict(rtol=1e-12, atol=1e-13)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


def test_layer_norm(rng):
    x = rng.standard_normal((7, 33)) * 3 + 1
    g, b = rng.standard_normal(33), rng.standard_normal(33)
    for a, c in zip(py.layer_norm_forward(x, g, b, 1e-12), compiled.layer_norm_forward(x, g, b, 1e-12)):
        np.testing.assert_allclose(a, c, **TOL)
    y, xhat, rstd = py.layer_norm_forward(x, g, b, 1e-12)
    dy = rng.standard_normal(x.shape)
    for a, c in zip(py.layer_norm_backward(dy, xhat, rstd, g), compiled.layer_norm_backward(dy, xhat, rstd, g)):
        np.testing.assert_allclose(a, c, **TOL)


def test_gelu(rng):
    x = rng.standard_normal((5, 17)) * 3
    y1, t1 = py.gelu_forward(x)
    y2, t2 = compiled.gelu_forward(x)
    np.testing.assert_allclose(y1, y2, **TOL)
    dy = rng.standard_normal(x.shape)
    np.testing.assert_allclose(py.gelu_backward(x, t1, dy), compiled.gelu_backward(x, t2, dy), **TOL)


def test_softmax(rng):
    x = rng.standard_normal((6, 11)) * 10
    y1 = py.softmax_forward(x)
    np.testing.assert_allclose(y1, compiled.softmax_forward(x), **TOL)
    dy = rng.standard_normal(x.shape)
    np.testing.assert_allclose(py.softmax_backward(y1, dy), compiled.softmax_backward(y1, dy), **TOL)


def _adam_args(rng, n):
    return [rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(n) * 0.1,
            rng.random(n) * 0.1]


def test_adam_dense(rng):
    a = _adam_args(rng, 50)
    b = [v.copy() for v in a]
    hyper = (1e-3, 0.9, 0.999, 1e-6, 1 - 0.9**3, 1 - 0.999**3)
    py.adam_dense(*a, *hyper)
    compiled.adam_dense(*b, *hyper)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, **TOL)


def test_adam_sparse(rng):
    theta, g, _, _ = _adam_args(rng, 50)
    idx = np.array([1, 4, 9, 30], dtype=np.int64)
    m, v = rng.standard_normal(4) * 0.1, rng.random(4) * 0.1
    a = [theta.copy(), g, idx, m.copy(), v.copy()]
    b = [theta.copy(), g, idx, m.copy(), v.copy()]
    hyper = (1e-3, 0.9, 0.999, 1e-6, 0.1, 0.001)
    py.adam_sparse(*a, *hyper)
    compiled.adam_sparse(*b, *hyper)
    for u, w in zip(a, b):
        np.testing.assert_allclose(u, w, **TOL)
    untouched = np.setdiff1d(np.arange(50), idx)
    np.testing.assert_array_equal(a[0][untouched], theta[untouched])
