import numpy as np
import pytest

from meteocast.layers import DenseParams, LstmParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_lstm(rng, n_in, H, scale=0.5):
    return LstmParams(
        rng.normal(0, scale, (n_in, 4 * H)),
        rng.normal(0, scale, (H, 4 * H)),
        rng.normal(0, scale, 4 * H),
    )


def random_dense(rng, n_in, n_out, scale=0.5):
    return DenseParams(rng.normal(0, scale, (n_in, n_out)), rng.normal(0, scale, n_out))


def fd_check(f, x, analytic, tol=1e-4, h=1e-5):
    """Assert ``analytic`` matches central differences of ``f`` at ``x``; ``x`` is restored."""
    from meteocast.numerics import finite_difference_gradient, relative_error

    saved = x.copy()

    def g(v):
        x[...] = v
        return f()

    numeric = finite_difference_gradient(g, saved, h)
    x[...] = saved
    err = relative_error(analytic, numeric, floor=1e-6)
    assert err <= tol, f"relative error {err:.3e} exceeds {tol}"
    return err
