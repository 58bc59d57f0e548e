import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meteocast.exceptions import ConfigurationError, NumericError, ShapeError
from meteocast.numerics import (
    RNG_ALGORITHM,
    activate,
    finite_difference_gradient,
    make_rng,
    matmul,
    softmax,
)


def test_matmul_identity_and_zero(rng):
    b = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(matmul(np.eye(3), b), b)
    np.testing.assert_array_equal(matmul(b, np.zeros((4, 2))), np.zeros((3, 2)))


def test_matmul_hand_case():
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_row_major_layout(rng):
    a = rng.normal(size=(3, 5))
    flat = a.reshape(-1)
    assert flat[2 * 5 + 4] == a[2, 4]
    np.testing.assert_array_equal(a.T.T.reshape(15), flat)


def test_softmax_uniform_and_saturation():
    np.testing.assert_allclose(softmax(np.full(7, 3.2)), np.full(7, 1 / 7), atol=1e-15)
    out = softmax(np.array([0.0, 800.0]))
    assert out[1] == pytest.approx(1.0) and out[0] < 1e-300


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 40)),
              elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(x, c):
    s = softmax(x, axis=1)
    assert np.all(s > 0) or np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(x + c, axis=1), s, atol=1e-12)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        softmax(np.ones((2, 2)), axis=2)


def test_activations():
    assert activate(0.0, "sigmoid") == 0.5
    assert activate(0.0, "tanh") == 0.0
    x = np.array([-3.0, 0.5, 2.0])
    np.testing.assert_array_equal(activate(x, "linear"), x)
    big = activate(np.array([-1000.0, 1000.0]), "sigmoid")
    assert np.all(np.isfinite(big))
    with pytest.raises(ConfigurationError):
        activate(x, "relu6")


def test_finite_difference_gradient(rng):
    x = rng.normal(size=5)
    g = finite_difference_gradient(lambda v: np.sum(v**2), x, 1e-5)
    np.testing.assert_allclose(g, 2 * x, atol=1e-8)
    np.testing.assert_array_equal(finite_difference_gradient(lambda v: 3.0, x), np.zeros(5))
    g0 = finite_difference_gradient(lambda v: np.sin(v[0]), np.zeros(1), 1e-5)
    assert abs(g0[0] - 1.0) < 1e-8


def test_finite_difference_errors():
    with pytest.raises(ConfigurationError):
        finite_difference_gradient(lambda v: 0.0, np.zeros(2), 0.0)
    with pytest.raises(NumericError):
        finite_difference_gradient(lambda v: np.inf, np.zeros(2))


def test_rng_reproducible():
    a = make_rng(7).random(100)
    b = make_rng(7).random(100)
    np.testing.assert_array_equal(a, b)
    assert RNG_ALGORITHM == "numpy.PCG64"


def test_rng_identical_across_processes():
    code = "from meteocast.numerics import make_rng; print(make_rng(99).random(5).tobytes().hex())"
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    assert runs[0] == runs[1] == make_rng(99).random(5).tobytes().hex() + "\n"
