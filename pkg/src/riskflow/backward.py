"""Backward component of the system: regression-based conditional expectations.

Longstaff-Schwartz style scheme on a polynomial basis in (x, xi): per node,
y is the fitted conditional expectation of the next value plus the driver
step, while z and r come from martingale-increment regressions

    z_k  ~ E[y_{k+1} dW_k | F_k] / dt
    r_ki ~ E[y_{k+1} dN~_k(i) | F_k] / (w_i dt)

which have lower variance than difference quotients. Fully coupled models
are handled by Picard alternation of the forward simulation and the backward
solve; the iteration's failure mode is reported, never hidden.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CoefficientModel, ControlPolicy, MarkSet, TimeGrid
from .engine import PathBundle, simulate_forward
from .errors import SolverError, UsageError
from .rng import RngSpec

_COND_LIMIT = 1e12
_DEGENERATE_TOL = 1e-12


@dataclass
class RegressionBasis:
    """Polynomial basis of total degree ``degree`` in the state variables (x, xi).

    After a backward solve, ``fits`` holds one record per node (kept columns,
    coefficient vectors, condition number) and ``max_condition`` the largest
    condition number seen; fits are deterministic given the paths.
    """

    degree: int = 2
    fits: list = field(default_factory=list)
    max_condition: float = 0.0

    @property
    def dimension(self) -> int:
        d = self.degree
        return (d + 1) * (d + 2) // 2  # monomials x^a xi^b with a+b <= d

    def design(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        cols = []
        for total in range(self.degree + 1):
            for a in range(total + 1):
                b = total - a
                cols.append((x**a) * (xi**b))
        return np.column_stack(cols)


def _regress(basis: RegressionBasis, x, xi, targets: np.ndarray, node: int, stage: str = "mean"):
    """Least squares of each target column on the basis; returns fitted values.

    Columns that are numerically constant (e.g. xi when f == 0, or x at the
    initial node) are dropped, keeping the intercept, so degenerate designs
    stay solvable; the condition number of the kept design is recorded.
    """
    X = basis.design(np.asarray(x, float), np.asarray(xi, float))
    keep = [0]
    for j in range(1, X.shape[1]):
        col = X[:, j]
        if np.std(col) > _DEGENERATE_TOL * max(1.0, float(np.max(np.abs(col)))):
            keep.append(j)
    Xk = X[:, keep]
    sol, _, rank, sv = np.linalg.lstsq(Xk, targets, rcond=None)
    cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else np.inf
    if cond > _COND_LIMIT or rank < Xk.shape[1]:
        raise SolverError(
            f"singular regression at node {node} (condition {cond:.3g}); "
            "use more paths or a lower basis degree"
        )
    basis.fits.append({"node": node, "stage": stage, "kept_columns": keep, "coefficients": sol, "condition": cond})
    basis.max_condition = max(basis.max_condition, cond)
    return Xk @ sol


def solve_backward(
    model: CoefficientModel,
    paths: PathBundle,
    terminal_a: float,
    basis: RegressionBasis = None,
) -> PathBundle:
    """Fill (y, z, r) in the bundle by backward induction from y(T) = a.

    The driver g is evaluated F_k-measurably at the fitted conditional mean
    of y, and the backward drift sign of the model decides whether the step
    is y_k = E[y_{k+1}] + g dt (canonical, sign -1) or minus.
    """
    basis = basis if basis is not None else RegressionBasis()
    basis.fits = []
    basis.max_condition = 0.0
    grid, marks = paths.grid, paths.marks
    N, dt, M = grid.N, grid.dt, marks.M
    n = paths.n_paths
    if n < 10 * basis.dimension:
        raise UsageError(f"need at least {10 * basis.dimension} paths for a degree-{basis.degree} basis, got {n}")

    s = model.backward_drift_sign
    y, z, r = paths.y, paths.z, paths.r
    y[:, N] = terminal_a
    z[:, N] = 0.0
    if M:
        r[:, N, :] = 0.0

    for k in range(N - 1, -1, -1):
        t = grid.nodes[k]
        ynext = y[:, k + 1]
        ybar = _regress(basis, paths.x[:, k], paths.xi[:, k], ynext[:, None], k)[:, 0]
        # centering by the F_k-measurable fitted mean leaves the estimand
        # unchanged and removes the dominant variance term
        centered = ynext - ybar
        targets = [centered * paths.dW[:, k]]
        if M:
            comp = paths.jump_counts[:, k, :].astype(float) - marks.weights * dt
            for i in range(M):
                targets.append(centered * comp[:, i])
        fitted = _regress(basis, paths.x[:, k], paths.xi[:, k], np.column_stack(targets), k, stage="increments")
        z[:, k] = fitted[:, 0] / dt
        if M:
            for i in range(M):
                r[:, k, i] = fitted[:, 1 + i] / (marks.weights[i] * dt)
        gk = np.broadcast_to(
            np.asarray(model.g(t, paths.x[:, k], ybar, z[:, k], r[:, k, :], paths.u[:, k]), dtype=float),
            ybar.shape,
        )
        if not np.all(np.isfinite(gk)):
            raise SolverError(f"driver g produced non-finite values at node {k}")
        y[:, k] = ybar - s * gk * dt
    return paths


def apply_backward_fit(
    model: CoefficientModel,
    basis: RegressionBasis,
    paths: PathBundle,
    terminal_a: float,
) -> PathBundle:
    """Evaluate a solved backward fit on an independent bundle (out of sample).

    Uses the per-node coefficient records stored by solve_backward, so the
    conditional-expectation functions are fixed and residual statistics on
    the new paths are free of in-sample projection bias.
    """
    grid, marks = paths.grid, paths.marks
    N, dt, M = grid.N, grid.dt, marks.M
    by_node = {}
    for rec in basis.fits:
        by_node.setdefault(rec["node"], {})[rec["stage"]] = rec
    if set(by_node) != set(range(N)):
        raise UsageError("basis does not carry a complete backward fit")
    s = model.backward_drift_sign
    y, z, r = paths.y, paths.z, paths.r
    y[:, N] = terminal_a
    z[:, N] = 0.0
    if M:
        r[:, N, :] = 0.0
    for k in range(N - 1, -1, -1):
        X = basis.design(paths.x[:, k], paths.xi[:, k])
        mean_rec = by_node[k]["mean"]
        inc_rec = by_node[k]["increments"]
        ybar = X[:, mean_rec["kept_columns"]] @ mean_rec["coefficients"][:, 0]
        inc = X[:, inc_rec["kept_columns"]] @ inc_rec["coefficients"]
        z[:, k] = inc[:, 0] / dt
        for i in range(M):
            r[:, k, i] = inc[:, 1 + i] / (marks.weights[i] * dt)
        gk = np.asarray(model.g(grid.nodes[k], paths.x[:, k], ybar, z[:, k], r[:, k, :], paths.u[:, k]), float)
        y[:, k] = ybar - s * np.broadcast_to(gk, ybar.shape) * dt
    return paths


def martingale_residuals(paths: PathBundle, model: CoefficientModel):
    """Per-node mean of the one-step backward-equation residual with its band.

    Residual_k = y_{k+1} - y_k - s g dt - z_k dW_k - sum_i r_ki dN~_k(i),
    whose conditional mean is zero when (y, z, r) solve the equation. The
    returned standard error is that of the estimated conditional-mean
    increment (the innovation y_{k+1} - y_k - s g dt before subtracting the
    martingale terms): subtracting fitted martingale parts shrinks the
    residual's own spread below the precision at which the mean was ever
    estimable, so the innovation scale is the honest yardstick.
    """
    grid, marks = paths.grid, paths.marks
    N, dt, M = grid.N, grid.dt, marks.M
    s = model.backward_drift_sign
    means = np.empty(N)
    ses = np.empty(N)
    n = paths.n_paths
    for k in range(N):
        gk = model.g(grid.nodes[k], paths.x[:, k], paths.y[:, k], paths.z[:, k], paths.r[:, k, :], paths.u[:, k])
        innovation = paths.y[:, k + 1] - paths.y[:, k] - s * np.asarray(gk, float) * dt
        resid = innovation - paths.z[:, k] * paths.dW[:, k]
        if M:
            comp = paths.jump_counts[:, k, :].astype(float) - marks.weights * dt
            resid = resid - np.sum(paths.r[:, k, :] * comp, axis=1)
        means[k] = resid.mean()
        ses[k] = innovation.std(ddof=1) / np.sqrt(n)
    return means, ses


@dataclass
class CouplingReport:
    """Successive-iterate deltas of the forward-backward alternation."""

    deltas: list = field(default_factory=list)  # per iteration: dict with x/y/z sup-node RMS deltas
    converged: bool = False
    tol: float = np.nan

    @property
    def iterations(self) -> int:
        return len(self.deltas)

    def combined(self) -> list:
        return [max(d["x"], d["y"], d["z"]) for d in self.deltas]


def _sup_rms(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.sqrt(np.mean((a - b) ** 2, axis=0))))


def picard_couple(
    model: CoefficientModel,
    policy: ControlPolicy,
    grid: TimeGrid,
    marks: MarkSet,
    rng: RngSpec,
    n_paths: int,
    x0: float,
    terminal_a: float,
    basis: RegressionBasis = None,
    max_iter: int = 20,
    tol: float = 1e-3,
    damping: float = 1.0,
    draws=None,
) -> tuple:
    """Alternate simulate_forward / solve_backward until the iterates settle.

    Returns (bundle, report) on success; raises SolverError with the report
    attached after three consecutive growing deltas. Damping < 1 relaxes the
    (y, z, r) sources fed back into the forward pass. The same draws are
    reused for every iteration (and may be shared across calls for common
    random numbers).
    """
    if max_iter < 1:
        raise UsageError("max_iter must be >= 1")
    from .engine import make_draws

    if draws is None:
        draws = make_draws(grid, marks, rng, n_paths)
    report = CouplingReport(tol=tol)
    y_src = z_src = r_src = None
    prev = None
    grew = 0
    for _ in range(max_iter):
        bundle = simulate_forward(
            model, policy, grid, marks, rng, n_paths, x0,
            y_source=y_src, z_source=z_src, r_source=r_src, draws=draws,
        )
        solve_backward(model, bundle, terminal_a, basis)
        if prev is not None:
            delta = {
                "x": _sup_rms(bundle.x, prev.x),
                "y": _sup_rms(bundle.y, prev.y),
                "z": _sup_rms(bundle.z, prev.z),
            }
            report.deltas.append(delta)
            combined = max(delta.values())
            if combined <= tol:
                report.converged = True
                bundle.metadata["coupling"] = report
                return bundle, report
            if len(report.deltas) >= 2 and combined > max(report.deltas[-2].values()):
                grew += 1
                if grew >= 3:
                    raise SolverError(
                        f"Picard iteration diverging (delta {combined:.3g} after {report.iterations} iterations)",
                        report=report,
                    )
            else:
                grew = 0
        if damping >= 1.0 or prev is None:
            y_src, z_src, r_src = bundle.y, bundle.z, bundle.r
        else:
            y_src = damping * bundle.y + (1 - damping) * prev.y
            z_src = damping * bundle.z + (1 - damping) * prev.z
            r_src = damping * bundle.r + (1 - damping) * prev.r
        prev = bundle
    bundle.metadata["coupling"] = report
    return bundle, report
