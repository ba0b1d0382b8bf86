import numpy as np
import pytest

from riskflow import (
    CoefficientModel,
    build_grid,
    constant_policy,
    validate_mark_set,
)
from riskflow.rng import RngSpec


def zeros_like(x):
    return 0.0 * np.asarray(x, dtype=float)


@pytest.fixture
def grid():
    return build_grid(1.0, 50)


@pytest.fixture
def no_marks():
    return validate_mark_set([], [])


@pytest.fixture
def one_mark():
    return validate_mark_set([0.5], [2.0])


@pytest.fixture
def rng():
    return RngSpec(123456789)


def make_model(
    b=None, sigma=None, g=None, f=None, Phi=None, Psi=None, gamma=None,
    bound=None, backward_drift_sign=-1.0, analytic_partials=None, name="test_model",
):
    """Small helper: any omitted coefficient is identically zero."""
    zero6 = lambda t, x, y, z, r, v: zeros_like(x)
    return CoefficientModel(
        b=b or zero6,
        sigma=sigma or zero6,
        g=g or zero6,
        f=f or zero6,
        Phi=Phi or (lambda x: zeros_like(x)),
        Psi=Psi or (lambda y: zeros_like(y)),
        gamma=gamma,
        bound=bound,
        backward_drift_sign=backward_drift_sign,
        analytic_partials=analytic_partials or {},
        name=name,
    )


@pytest.fixture
def zero_model():
    return make_model()


@pytest.fixture
def unit_drift_model():
    return make_model(b=lambda t, x, y, z, r, v: 1.0 + zeros_like(x))


def linear_gaussian_model(drift=0.1, sigma=0.2, g_slope=0.5, g_const=0.0):
    """Decoupled model with a Gaussian forward and an affine driver.

    Exact solution of the backward part: with dy = -g dt + z dW, y(T) = a and
    g = slope * x + const, y_t = a + (T - t)(const + slope (x_t + drift (T-t)/2))
    and z_t = slope * sigma * (T - t).
    """
    return make_model(
        b=lambda t, x, y, z, r, v: drift + zeros_like(x),
        sigma=lambda t, x, y, z, r, v: sigma + zeros_like(x),
        g=lambda t, x, y, z, r, v: g_slope * x + g_const,
        name="linear_gaussian",
    )


def bounded_model(scale=0.3, declared_bound=0.5):
    """All of f, Phi, Psi bounded by ``scale`` (< the declared constant)."""
    return make_model(
        b=lambda t, x, y, z, r, v: 0.2 + zeros_like(x),
        sigma=lambda t, x, y, z, r, v: 0.5 + zeros_like(x),
        f=lambda t, x, y, z, r, v: scale * np.sin(x) * np.cos(t),
        Phi=lambda x: scale * np.tanh(x),
        Psi=lambda y: scale * np.tanh(y),
        bound=declared_bound,
        name="bounded_test",
    )


@pytest.fixture
def policy_zero():
    return constant_policy(0.0)


@pytest.fixture
def policy_one():
    return constant_policy(1.0)
