"""Shared domain types: time grids, discrete Levy measures, coefficient models.

Conventions used throughout the package:

* the controlled system is
      dx = b dt + sigma dW + integral gamma dN~        x(0) = d
      dy = s * g dt + z dW + integral r dN~            y(T) = a
  where ``s = model.backward_drift_sign`` is -1 for the canonical form
  (drift of y is ``-g``) and +1 for models stated directly in "drift = g"
  form; the pairing keeps one ``g`` evaluator usable both for simulation
  and for Hamiltonian assembly.
* coefficient evaluators take ``(t, x, y, z, r, v)`` and must be pure and
  numpy-vectorized: scalar or array arguments of a common broadcast shape,
  ``r`` carrying the mark axis last (shape ``(..., M)``).
* ``gamma`` takes one extra trailing argument, the mark value ``lam``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, EvaluationError, UsageError

_FD_STEP = float(np.cbrt(np.finfo(float).eps))  # optimal central-difference step scale


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into N steps."""

    T: float
    N: int
    dt: float
    nodes: np.ndarray

    def __post_init__(self):
        if not (self.nodes[0] == 0.0 and self.nodes[-1] == self.T):
            raise ConfigurationError("grid endpoints must be exactly 0 and T")
        if np.any(np.diff(self.nodes) <= 0):
            raise ConfigurationError("grid nodes must be strictly increasing")
        if abs(self.dt * self.N - self.T) > np.finfo(float).eps * abs(self.T):
            raise ConfigurationError("dt * N must equal T to one unit of rounding")


def build_grid(T: float, N: int) -> TimeGrid:
    """Uniform grid with nodes t_k = k * T / N."""
    if not np.isfinite(T) or T <= 0:
        raise ConfigurationError(f"horizon T must be positive and finite, got {T}")
    if int(N) < 1:
        raise ConfigurationError(f"step count N must be >= 1, got {N}")
    N = int(N)
    return TimeGrid(T=float(T), N=N, dt=float(T) / N, nodes=_readonly(np.linspace(0.0, float(T), N + 1)))


@dataclass(frozen=True)
class MarkSet:
    """Finite-activity Levy measure: discrete marks with positive intensity weights.

    M = 0 encodes the jump-free (pure diffusion) model.
    """

    marks: np.ndarray
    weights: np.ndarray
    total_intensity: float

    @property
    def M(self) -> int:
        return len(self.marks)


def validate_mark_set(marks, weights) -> MarkSet:
    """Check and normalize a (marks, weights) pair into a MarkSet."""
    marks = np.asarray(marks, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if marks.shape != weights.shape or marks.ndim != 1:
        raise ConfigurationError(
            f"marks and weights must be equal-length 1-d sequences, got shapes {marks.shape} and {weights.shape}"
        )
    if np.any(~np.isfinite(marks)):
        raise ConfigurationError("mark values must be finite")
    if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
        raise ConfigurationError("every mark weight must be strictly positive and finite")
    # contract mirror of the integrability condition on the measure; always
    # finite for finite support but asserted so the invariant is executable
    if not np.isfinite(np.sum(weights * np.minimum(1.0, marks**2))):
        raise ConfigurationError("sum w_i (1 ^ lambda_i^2) must be finite")
    return MarkSet(marks=_readonly(marks), weights=_readonly(weights), total_intensity=float(weights.sum()))


@dataclass(frozen=True)
class StatePoint:
    """One node of a trajectory: (t, x, y, z, r) with r holding one entry per mark."""

    t: float
    x: float
    y: float
    z: float
    r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.atleast_1d(np.asarray(self.r, dtype=float)))


@dataclass(frozen=True)
class RiskParams:
    """Risk-sensitivity parameter theta > 0 (the risk-neutral limit is theta -> 0+, never 0)."""

    theta: float

    def __post_init__(self):
        if not np.isfinite(self.theta) or self.theta <= 0:
            raise ConfigurationError(f"theta must be strictly positive, got {self.theta}")
        if self.theta > 10.0:
            warnings.warn(
                f"theta = {self.theta} is outside the validated range (0, 10]; "
                "exp(theta * cost) may overflow",
                stacklevel=2,
            )


@dataclass(frozen=True)
class ControlPolicy:
    """Feedback map u(t, x, y, r) or an open-loop table, clamped to U = [u_min, u_max].

    The policy itself is pure; the engine clamps the raw values and counts
    clamping events into the path bundle's metadata.
    """

    feedback: Optional[Callable] = None
    table: Optional[np.ndarray] = None  # value per grid node index
    u_min: float = -np.inf
    u_max: float = np.inf

    def __post_init__(self):
        if (self.feedback is None) == (self.table is None):
            raise ConfigurationError("provide exactly one of feedback or table")
        if not self.u_min <= self.u_max:
            raise ConfigurationError("empty admissible interval U")
        if self.table is not None:
            object.__setattr__(self, "table", _readonly(self.table))

    def raw(self, k: int, t: float, x, y, r):
        if self.table is not None:
            return np.broadcast_to(self.table[k], np.shape(x)).copy() if np.ndim(x) else float(self.table[k])
        return self.feedback(t, x, y, r)

    def contains(self, v) -> bool:
        return bool(np.all(v >= self.u_min) and np.all(v <= self.u_max))

    def shifted(self, delta: float) -> "ControlPolicy":
        """Same policy with a constant added to the raw values (perturbation probes)."""
        if self.table is not None:
            return ControlPolicy(table=self.table + delta, u_min=self.u_min, u_max=self.u_max)
        base = self.feedback
        return ControlPolicy(
            feedback=lambda t, x, y, r: base(t, x, y, r) + delta,
            u_min=self.u_min,
            u_max=self.u_max,
        )


def constant_policy(value: float, u_min=-np.inf, u_max=np.inf) -> ControlPolicy:
    return ControlPolicy(feedback=lambda t, x, y, r: np.full_like(np.asarray(x, dtype=float), value), u_min=u_min, u_max=u_max)


@dataclass(frozen=True)
class CoefficientModel:
    """Evaluatable coefficients (b, sigma, gamma, g, f) and terminal maps (Phi, Psi).

    ``partials`` may hold analytic first derivatives keyed by
    ``(coefficient_name, variable_name)``, e.g. ``("b", "x")``; anything
    missing falls back to a central finite difference (see :func:`partials`).
    ``bound`` is the declared constant C bounding f, Phi, Psi for models that
    advertise it (None means unbounded; bound-dependent checks then refuse).
    """

    b: Callable
    sigma: Callable
    g: Callable
    f: Callable
    Phi: Callable
    Psi: Callable
    gamma: Callable = None  # (t, x, y, z, r, v, lam); unused when M = 0
    analytic_partials: dict = field(default_factory=dict)
    bound: Optional[float] = None
    backward_drift_sign: float = -1.0
    name: str = "model"

    def __post_init__(self):
        if self.gamma is None:
            object.__setattr__(self, "gamma", lambda t, x, y, z, r, v, lam: np.zeros_like(np.asarray(x, dtype=float)))
        if self.backward_drift_sign not in (-1.0, 1.0):
            raise ConfigurationError("backward_drift_sign must be -1.0 or +1.0")

    def has_partial(self, which: str, wrt: str) -> bool:
        return (which, wrt) in self.analytic_partials

    def partial_mode(self, which: str, wrt: str) -> str:
        return "analytic" if self.has_partial(which, wrt) else "finite_difference"


def evaluate(model: CoefficientModel, which: str, at: StatePoint, v: float, lam: float = None):
    """Evaluate one named coefficient at a state point; a non-finite result raises EvaluationError."""
    if which == "gamma":
        out = model.gamma(at.t, at.x, at.y, at.z, at.r, v, lam)
    elif which in ("b", "sigma", "g", "f"):
        out = getattr(model, which)(at.t, at.x, at.y, at.z, at.r, v)
    elif which == "Phi":
        out = model.Phi(at.x)
    elif which == "Psi":
        out = model.Psi(at.y)
    else:
        raise UsageError(f"unknown coefficient {which!r}")
    if not np.all(np.isfinite(out)):
        raise EvaluationError(f"coefficient {which!r} returned a non-finite value at t={at.t}")
    return float(out) if np.ndim(out) == 0 else out


def partials(
    model: CoefficientModel,
    which: str,
    wrt: str,
    at: StatePoint,
    v: float,
    mark_index: int = None,
    lam: float = None,
) -> float:
    """First partial derivative of a coefficient at (state, control).

    Uses the model's analytic partial when declared, otherwise a central
    finite difference with step ``cbrt(eps) * max(1, |value|)``. The route
    taken is queryable via ``model.partial_mode(which, wrt)`` so callers can
    record it in results metadata. ``wrt="r"`` differentiates the component
    ``mark_index``; for ``which="gamma"`` the mark value ``lam`` must be given.
    """
    if wrt not in ("x", "y", "z", "r", "v"):
        raise UsageError(f"cannot differentiate with respect to {wrt!r}")
    if which == "gamma" and lam is None:
        raise UsageError("gamma partials require the mark value lam")
    if wrt == "r" and mark_index is None:
        mark_index = 0

    key = (which, wrt)
    if key in model.analytic_partials:
        fn = model.analytic_partials[key]
        if which == "gamma":
            out = fn(at.t, at.x, at.y, at.z, at.r, v, lam)
        elif which == "Phi":
            out = fn(at.x)
        elif which == "Psi":
            out = fn(at.y)
        else:
            out = fn(at.t, at.x, at.y, at.z, at.r, v)
        if wrt == "r" and np.ndim(out) > 0:
            out = np.asarray(out)[..., mark_index]
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"analytic partial of {which!r} wrt {wrt!r} is non-finite at t={at.t}")
        return float(out)

    center = float(at.r[mark_index]) if wrt == "r" else float(dict(x=at.x, y=at.y, z=at.z, v=v).get(wrt, 0.0))
    h = _FD_STEP * max(1.0, abs(center))

    def at_offset(delta: float) -> float:
        st = dict(t=at.t, x=at.x, y=at.y, z=at.z, r=at.r.copy(), v=v)
        if wrt == "r":
            st["r"][mark_index] += delta
        else:
            st[wrt] = st[wrt] + delta
        point = StatePoint(t=st["t"], x=st["x"], y=st["y"], z=st["z"], r=st["r"])
        return float(evaluate(model, which, point, st["v"], lam=lam))

    return (at_offset(+h) - at_offset(-h)) / (2.0 * h)
