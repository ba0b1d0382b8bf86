import numpy as np
import pytest

from riskflow import (
    ControlPolicy,
    RiskParams,
    StatePoint,
    build_grid,
    partials,
    validate_mark_set,
)
from riskflow.cashflow import CashflowParams, mean_variance_model
from riskflow.errors import ConfigurationError, EvaluationError
from conftest import make_model, zeros_like


class TestBuildGrid:
    def test_uniform_partition(self):
        g = build_grid(1.0, 4)
        assert np.array_equal(g.nodes, [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_degenerate_grid(self):
        g = build_grid(1.0, 1)
        assert np.array_equal(g.nodes, [0.0, 1.0])

    def test_arithmetic(self):
        g = build_grid(2.0, 1000)
        assert g.dt == pytest.approx(0.002, abs=0)
        assert g.nodes[500] == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("T,N", [(0.0, 10), (-1.0, 10), (1.0, 0), (np.nan, 10)])
    def test_rejects_bad_input(self, T, N):
        with pytest.raises(ConfigurationError):
            build_grid(T, N)


class TestValidateMarkSet:
    def test_empty_measure(self):
        ms = validate_mark_set([], [])
        assert ms.M == 0 and ms.total_intensity == 0.0

    def test_single_atom(self):
        assert validate_mark_set([0.5], [2.0]).total_intensity == 2.0

    def test_sum(self):
        assert validate_mark_set([-0.2, 0.3], [1.0, 1.5]).total_intensity == 2.5

    def test_rejects_nonpositive_weight(self):
        with pytest.raises(ConfigurationError):
            validate_mark_set([0.1], [0.0])
        with pytest.raises(ConfigurationError):
            validate_mark_set([0.1], [-1.0])

    def test_rejects_nan_mark(self):
        with pytest.raises(ConfigurationError):
            validate_mark_set([np.nan], [1.0])

    def test_idempotent(self):
        ms = validate_mark_set([-0.2, 0.3], [1.0, 1.5])
        again = validate_mark_set(ms.marks, ms.weights)
        assert np.array_equal(again.marks, ms.marks)
        assert np.array_equal(again.weights, ms.weights)
        assert again.total_intensity == ms.total_intensity


def _point(x=3.0, y=0.5, z=0.1, r=(0.0,), t=0.2):
    return StatePoint(t=t, x=x, y=y, z=z, r=np.array(r))


class TestPartials:
    def test_affine_drift_slope(self):
        # drift rho v - c x has x-slope -c
        model = make_model(b=lambda t, x, y, z, r, v: 0.2 * v - 0.1 * x)
        assert partials(model, "b", "x", _point(), 1.0) == pytest.approx(-0.1, abs=1e-9)

    def test_constant_coefficient(self):
        model = make_model(b=lambda t, x, y, z, r, v: 0.7 + zeros_like(x))
        assert partials(model, "b", "x", _point(), 1.0) == pytest.approx(0.0, abs=1e-9)

    def test_quadratic_fd_matches_analytic(self):
        model = make_model(f=lambda t, x, y, z, r, v: x**2)
        assert partials(model, "f", "x", _point(x=3.0), 0.0) == pytest.approx(6.0, abs=1e-6)

    def test_analytic_route_preferred(self):
        marker = {"called": False}

        def exact(t, x, y, z, r, v):
            marker["called"] = True
            return -0.1

        model = make_model(
            b=lambda t, x, y, z, r, v: 0.2 * v - 0.1 * x,
            analytic_partials={("b", "x"): exact},
        )
        assert model.partial_mode("b", "x") == "analytic"
        assert model.partial_mode("b", "y") == "finite_difference"
        assert partials(model, "b", "x", _point(), 1.0) == -0.1
        assert marker["called"]

    def test_nan_raises_named_error(self):
        model = make_model(g=lambda t, x, y, z, r, v: np.nan + zeros_like(x))
        with pytest.raises(EvaluationError, match="'g'"):
            partials(model, "g", "x", _point(), 0.0)

    def test_fd_agrees_with_analytic_on_example_coefficients(self):
        # every coefficient of the cash-flow example is affine or quadratic,
        # so the central difference should agree with the declared partials
        params = CashflowParams()
        model = mean_variance_model(params, y0_pin=0.4)
        bare = make_model(b=model.b, sigma=model.sigma, g=model.g, f=model.f, Phi=model.Phi, Psi=model.Psi)
        pt = _point(x=1.3, y=-0.2, z=0.05)
        for which, wrt in [("b", "x"), ("b", "v"), ("sigma", "v"), ("g", "x"), ("g", "y"), ("g", "v"), ("Phi", "x"), ("Psi", "y")]:
            exact = partials(model, which, wrt, pt, 0.7)
            fd = partials(bare, which, wrt, pt, 0.7)
            assert fd == pytest.approx(exact, rel=1e-5, abs=1e-8), (which, wrt)


class TestControlPolicy:
    def test_clamping_and_count(self, grid, no_marks, rng, zero_model):
        from riskflow import simulate_forward

        policy = ControlPolicy(feedback=lambda t, x, y, r: 2.0 + zeros_like(x), u_min=-1.0, u_max=1.0)
        bundle = simulate_forward(zero_model, policy, grid, no_marks, rng, 8, x0=0.0)
        assert np.all(bundle.u <= 1.0)
        assert bundle.metadata["clamp_count"] == 8 * grid.N  # every applied control clamped

    def test_table_policy(self, grid):
        table = np.linspace(0.0, 1.0, grid.N + 1)
        policy = ControlPolicy(table=table)
        assert policy.raw(3, grid.nodes[3], 0.0, 0.0, np.zeros(0)) == table[3]

    def test_exactly_one_spec(self):
        with pytest.raises(ConfigurationError):
            ControlPolicy()
        with pytest.raises(ConfigurationError):
            ControlPolicy(feedback=lambda t, x, y, r: x, table=np.zeros(3))


class TestRiskParams:
    def test_rejects_zero_theta(self):
        with pytest.raises(ConfigurationError):
            RiskParams(0.0)

    def test_rejects_negative_theta(self):
        with pytest.raises(ConfigurationError):
            RiskParams(-0.5)

    def test_warns_above_validated_range(self):
        with pytest.warns(UserWarning):
            RiskParams(11.0)
