"""Risk-sensitive functionals over simulated paths.

The terminal aggregate per path is Theta_T = Phi(x_T) + Psi(y_0) + xi_T
(the running cost folded in through the auxiliary integral xi). The
exponential cost is J^theta = E[exp(theta Theta_T)], its certainty
equivalent (1/theta) log J^theta, and the conditional exponential
martingale V(t) = E[exp(theta Theta_T) | F_t] with its multiplicative
density V(t)/V(0). Jump parts of the density use the stochastic
exponential: each jump multiplies by (1 + theta * jump_load), with the
compensator exp(-theta * integral of jump_load), which keeps the density a
positive unit-mean martingale for any finite-activity mark set.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backward import RegressionBasis
from .core import CoefficientModel, ControlPolicy, RiskParams, StatePoint, partials
from .engine import MCEstimate, PathBundle, mc_estimate, sample_jumps, _bin_jumps
from .errors import NumericError, StatisticsError, UsageError
from .rng import NESTED, RngSpec

_EXP_LIMIT = 700.0  # exp overflows above ~709 in double precision


def _theta_value(theta) -> float:
    return float(theta.theta) if isinstance(theta, RiskParams) else float(RiskParams(float(theta)).theta)


def theta_T(paths: PathBundle, model: CoefficientModel) -> np.ndarray:
    """Per-path terminal aggregate Phi(x_T) + Psi(y_0) + xi_T."""
    if paths.xi is None or not np.all(np.isfinite(paths.xi[:, -1])):
        raise UsageError("paths must carry the running-cost integral xi")
    xT = paths.x[:, -1]
    y0 = paths.y[:, 0]
    out = np.asarray(model.Phi(xT), dtype=float) + np.asarray(model.Psi(y0), dtype=float) + paths.xi[:, -1]
    return out


@dataclass(frozen=True)
class CostOutcome:
    """Exponential-cost aggregates for one sample of terminal values."""

    theta: float
    estimate: MCEstimate  # J^theta = mean exp(theta Theta_T), linear domain
    log_J: float  # log-sum-exp aggregation, always finite for finite inputs
    risk_loss: float  # certainty equivalent (1/theta) log J
    risk_loss_se: float  # delta-method standard error of the certainty equivalent


def cost_J_theta(theta_samples, theta) -> CostOutcome:
    """Monte Carlo estimate of E[exp(theta Theta_T)] with a log-domain guard.

    The linear and log-domain aggregations agree to rounding whenever both
    are finite; if even the log-domain mean exceeds the exp range a
    NumericError reports the largest terminal value. The certainty
    equivalent is the plug-in log of the Monte Carlo mean (consistent,
    biased O(1/n); delta-method standard error).
    """
    th = _theta_value(theta)
    a = np.asarray(theta_samples, dtype=float).ravel()
    if a.size < 1 or not np.all(np.isfinite(a)):
        raise StatisticsError("terminal samples must be a non-empty finite array")
    scaled = th * a
    shift = float(np.max(scaled))
    w = np.exp(scaled - shift)
    mean_w = float(np.mean(w))
    log_J = shift + np.log(mean_w)
    if log_J > _EXP_LIMIT:
        raise NumericError(
            f"exp cost overflows even in the log domain (log J = {log_J:.3g}, max Theta_T = {a.max():.6g})"
        )
    J = float(np.exp(log_J))
    if a.size >= 2:
        sd_w = float(np.std(w, ddof=1))
        se = np.exp(shift) * sd_w / np.sqrt(a.size)
        rl_se = sd_w / (mean_w * np.sqrt(a.size) * th)
    else:
        se = np.nan
        rl_se = np.nan
    from .engine import _Z95

    est = MCEstimate(mean=J, se=se, ci_low=J - _Z95 * se, ci_high=J + _Z95 * se, n=int(a.size))
    return CostOutcome(theta=th, estimate=est, log_J=float(log_J), risk_loss=float(log_J / th), risk_loss_se=float(rl_se))


def risk_loss(theta_samples, theta) -> float:
    """Certainty equivalent (1/theta) log E[exp(theta Theta_T)] via log-sum-exp."""
    return cost_J_theta(theta_samples, theta).risk_loss


@dataclass(frozen=True)
class ExpansionReport:
    thetas: np.ndarray
    residuals: np.ndarray  # risk_loss - (mean + theta/2 * variance) per theta
    sample_mean: float
    sample_var: float
    slope: Optional[float]  # log-log slope of |residual| vs theta; None when degenerate
    degenerate: bool


def expansion_residual(theta_samples, thetas) -> ExpansionReport:
    """Residual of the small-theta expansion of the certainty equivalent.

    For each theta, residual = risk_loss - (mean + theta/2 * var); the
    leading term is cubic-cumulant so |residual| ~ theta^2 and the fitted
    log-log slope should sit near 2 (exactly quadratic-plus in theta).
    Zero-variance samples give residuals identically 0 and a degenerate
    (None) slope.
    """
    a = np.asarray(theta_samples, dtype=float).ravel()
    ths = np.asarray(thetas, dtype=float).ravel()
    if np.any(ths <= 0) or np.any(np.diff(ths) <= 0):
        raise UsageError("theta list must be positive and strictly increasing")
    mean = float(np.mean(a))
    var = float(np.var(a, ddof=1)) if a.size > 1 else 0.0
    residuals = np.array([risk_loss(a, th) - (mean + th / 2.0 * var) for th in ths])
    if np.any(residuals == 0.0) or var == 0.0:
        return ExpansionReport(ths, residuals, mean, var, slope=None, degenerate=True)
    slope = float(np.polyfit(np.log(ths), np.log(np.abs(residuals)), 1)[0])
    return ExpansionReport(ths, residuals, mean, var, slope=slope, degenerate=False)


def exp_cost_terminal(paths: PathBundle, model: CoefficientModel, theta) -> np.ndarray:
    """Pathwise exp(theta Theta_T), the terminal value of the conditional martingale."""
    th = _theta_value(theta)
    t_T = theta_T(paths, model)
    scaled = th * t_T
    if np.max(scaled) > _EXP_LIMIT:
        raise NumericError(f"exp(theta Theta_T) overflows (max Theta_T = {t_T.max():.6g})")
    return np.exp(scaled)


def v_theta_bounds(model: CoefficientModel, theta, horizon: float) -> tuple:
    """Bounds exp(±(2 + T) C theta) valid when |f|, |Phi|, |Psi| <= C."""
    if model.bound is None:
        raise UsageError("model declares no bound constant; bounds are unavailable")
    th = _theta_value(theta)
    width = (2.0 + float(horizon)) * model.bound * th
    return float(np.exp(-width)), float(np.exp(width))


def v_theta(
    paths: PathBundle,
    model: CoefficientModel,
    theta,
    k: int,
    basis_degree: int = 2,
) -> np.ndarray:
    """Regression estimate of the conditional exponential cost at node k.

    Regresses exp(theta Theta_T) on a polynomial basis in (x_k, xi_k, y_k);
    at k = N the result is the exact pathwise terminal value.
    """
    N = paths.grid.N
    if not 0 <= k <= N:
        raise UsageError(f"node index {k} outside grid")
    target = exp_cost_terminal(paths, model, theta)
    if k == N:
        return target
    cols = [np.ones(paths.n_paths)]
    vars_ = (paths.x[:, k], paths.xi[:, k], paths.y[:, k])
    for total in range(1, basis_degree + 1):
        for ax in range(total + 1):
            for bx in range(total - ax + 1):
                cx = total - ax - bx
                cols.append((vars_[0] ** ax) * (vars_[1] ** bx) * (vars_[2] ** cx))
    X = np.column_stack(cols)
    keep = [0] + [j for j in range(1, X.shape[1]) if np.std(X[:, j]) > 1e-12 * max(1.0, float(np.max(np.abs(X[:, j]))))]
    sol, _, rank, sv = np.linalg.lstsq(X[:, keep], target, rcond=None)
    cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else np.inf
    if cond > 1e12:
        from .errors import SolverError

        raise SolverError(f"singular conditional regression at node {k} (condition {cond:.3g})")
    return X[:, keep] @ sol


def nested_v_theta(
    model: CoefficientModel,
    policy: ControlPolicy,
    paths: PathBundle,
    theta,
    k: int,
    inner_paths: int,
    rng: RngSpec,
    y_profile: Optional[np.ndarray] = None,
    z_profile: Optional[np.ndarray] = None,
    r_profile: Optional[np.ndarray] = None,
    outer_indices: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Nested Monte Carlo oracle for the conditional exponential cost at node k.

    For each selected outer path, restarts ``inner_paths`` fresh simulations
    from (t_k, x_k, xi_k) and averages exp(theta Theta_T). Valid for models
    whose forward coefficients and policy depend on the backward quantities
    only through the supplied deterministic per-node profiles (y, z, r as
    arrays over nodes). Slow and unbiased; the production path is the
    regression estimator.
    """
    th = _theta_value(theta)
    grid, marks = paths.grid, paths.marks
    N, dt, M = grid.N, grid.dt, marks.M
    y_prof = np.zeros(N + 1) if y_profile is None else np.asarray(y_profile, float)
    z_prof = np.zeros(N + 1) if z_profile is None else np.asarray(z_profile, float)
    r_prof = np.zeros((N + 1, M)) if r_profile is None else np.asarray(r_profile, float).reshape(N + 1, M)
    outer = np.arange(paths.n_paths) if outer_indices is None else np.asarray(outer_indices)

    out = np.empty(len(outer))
    for j, p in enumerate(outer):
        x = np.full(inner_paths, paths.x[p, k])
        xi = np.full(inner_paths, paths.xi[p, k])
        sub = rng.child(100000 + k * paths.n_paths + int(p))
        normals = np.empty((inner_paths, N - k))
        for q in range(inner_paths):
            normals[q] = sub.brownian_normals(q, N - k)
        counts = np.zeros((inner_paths, N - k, M), dtype=np.uint16)
        if M:
            # restriction of a Poisson random measure to (t_k, T] is again Poisson
            for q in range(inner_paths):
                led = sample_jumps(marks, grid, sub, q)
                keep = led.times > grid.nodes[k]
                if keep.any():
                    from .engine import JumpLedger

                    counts[q] = _bin_jumps(JumpLedger(led.times[keep], led.mark_idx[keep]), grid, M)[k:]
        for kk in range(k, N):
            t = grid.nodes[kk]
            yk = np.full(inner_paths, y_prof[kk])
            zk = np.full(inner_paths, z_prof[kk])
            rk = np.broadcast_to(r_prof[kk], (inner_paths, M))
            u = np.clip(np.asarray(policy.raw(kk, t, x, yk, rk), float), policy.u_min, policy.u_max)
            b = np.asarray(model.b(t, x, yk, zk, rk, u), float)
            s = np.asarray(model.sigma(t, x, yk, zk, rk, u), float)
            f = np.asarray(model.f(t, x, yk, zk, rk, u), float)
            incr = b * dt + s * normals[:, kk - k] * np.sqrt(dt)
            for i in range(M):
                gam = np.asarray(model.gamma(t, x, yk, zk, rk, u, marks.marks[i]), float)
                incr = incr + gam * (counts[:, kk - k, i].astype(float) - marks.weights[i] * dt)
            x = x + incr
            xi = xi + f * dt
        total = np.asarray(model.Phi(x), float) + float(model.Psi(paths.y[p, 0])) + xi
        out[j] = float(np.mean(np.exp(th * total)))
    return out


@dataclass
class GirsanovPaths:
    """Deterministic or pathwise loadings for the measure change.

    ``drift_load`` shifts the Brownian drift (theta * drift_load), and
    ``jump_load`` tilts each mark's intensity by (1 + theta * jump_load).
    Arrays are per node: shape (N+1,) or (n_paths, N+1); jump_load carries
    the mark axis last.
    """

    drift_load: np.ndarray
    jump_load: np.ndarray


def _per_path(arr, n_paths, extra=()):
    a = np.asarray(arr, dtype=float)
    want = (n_paths,) + tuple(extra)
    if a.shape == want[1:]:
        a = np.broadcast_to(a, want)
    if a.shape != want:
        raise UsageError(f"loading has shape {a.shape}, expected {want} or {want[1:]}")
    return a


def girsanov_density(girsanov: GirsanovPaths, theta, paths: PathBundle) -> np.ndarray:
    """Multiplicative change-of-measure density along each path.

    Log-domain accumulation per step: the continuous part
    theta l dW - theta^2/2 l^2 dt plus, per realized jump of mark i,
    log(1 + theta L_i), minus the compensator theta dt sum_i w_i L_i.
    A jump with 1 + theta L <= 0 signals a mis-specified loading and raises.
    """
    th = _theta_value(theta)
    grid, marks = paths.grid, paths.marks
    N, dt, M = grid.N, grid.dt, marks.M
    n = paths.n_paths
    l = _per_path(girsanov.drift_load, n, (N + 1,))
    L = _per_path(girsanov.jump_load, n, (N + 1, M)) if M else np.zeros((n, N + 1, 0))

    log_density = np.zeros((n, N + 1))
    acc = np.zeros(n)
    for k in range(N):
        lk = l[:, k]
        step = th * lk * paths.dW[:, k] - 0.5 * th**2 * lk**2 * dt
        if M:
            Lk = L[:, k, :]
            jump_factor = 1.0 + th * Lk
            counts = paths.jump_counts[:, k, :].astype(float)
            hit = counts > 0
            if np.any(hit & (jump_factor <= 0.0)):
                raise NumericError(
                    f"density lost positivity at node {k}: 1 + theta * jump_load <= 0 at a realized jump"
                )
            with np.errstate(invalid="ignore", divide="ignore"):
                logs = np.where(hit, np.log(np.where(jump_factor > 0, jump_factor, 1.0)), 0.0)
            step = step + np.sum(counts * logs, axis=1) - th * dt * np.sum(marks.weights * Lk, axis=1)
        acc = acc + step
        log_density[:, k + 1] = acc
    return np.exp(log_density)


def girsanov_shifted_increments(girsanov: GirsanovPaths, theta, paths: PathBundle):
    """Increments of the drivers under the tilted measure.

    Returns (dW_shifted, dN_compensated_shifted): per step, dW - theta l dt
    and counts - w_i (1 + theta L_i) dt.
    """
    th = _theta_value(theta)
    grid, marks = paths.grid, paths.marks
    N, dt, M = grid.N, grid.dt, marks.M
    n = paths.n_paths
    l = _per_path(girsanov.drift_load, n, (N + 1,))
    dw_shift = paths.dW - th * l[:, :N] * dt
    if M:
        L = _per_path(girsanov.jump_load, n, (N + 1, M))
        dn_shift = paths.jump_counts.astype(float) - marks.weights * (1.0 + th * L[:, :N, :]) * dt
    else:
        dn_shift = np.zeros((n, N, 0))
    return dw_shift, dn_shift


@dataclass(frozen=True)
class GeneratorResidualReport:
    node_means: np.ndarray
    node_ses: np.ndarray
    terminal_mismatch: float  # |Lambda_T - (Phi(x_T) + Psi(y_0))|, mean over paths
    terminal_mismatch_gradient_variant: float  # same with Phi_x in place of Phi


def quadratic_generator_residual(
    ce_paths: np.ndarray,
    drift_load,
    jump_load,
    paths: PathBundle,
    model: CoefficientModel,
    theta,
) -> GeneratorResidualReport:
    """Per-node mean residual of the quadratic backward equation for the certainty equivalent.

    ``ce_paths`` holds the conditional certainty equivalent Lambda(t_k) per
    path (from the nested oracle); the residual per step is

        dLambda + {f + th/2 l^2 + th/2 sum w L^2
                   + sum w ((e^{th r} - 1)/th - r)} dt
        - l dW - sum_i (L_i - (e^{th r_i} - 1)/th) dN~_i

    whose conditional mean vanishes when the generator is correct. Both
    readings of the terminal condition are measured and reported without
    deciding between them.
    """
    th = _theta_value(theta)
    ce = np.asarray(ce_paths, dtype=float)
    grid, marks = paths.grid, paths.marks
    N, dt, M = grid.N, grid.dt, marks.M
    n = paths.n_paths
    if ce.shape != (n, N + 1):
        raise UsageError(f"certainty-equivalent trajectory has shape {ce.shape}, expected {(n, N + 1)}")
    l = _per_path(drift_load, n, (N + 1,))
    L = _per_path(jump_load, n, (N + 1, M)) if M else np.zeros((n, N + 1, 0))

    node_means = np.empty(N)
    node_ses = np.empty(N)
    for k in range(N):
        t = grid.nodes[k]
        rk = paths.r[:, k, :]
        fk = np.broadcast_to(
            np.asarray(model.f(t, paths.x[:, k], paths.y[:, k], paths.z[:, k], rk, paths.u[:, k]), float),
            (n,),
        )
        gen = fk + 0.5 * th * l[:, k] ** 2
        mart = l[:, k] * paths.dW[:, k]
        if M:
            Lk = L[:, k, :]
            expm = (np.exp(th * rk) - 1.0) / th
            gen = gen + 0.5 * th * np.sum(marks.weights * Lk**2, axis=1) + np.sum(
                marks.weights * (expm - rk), axis=1
            )
            comp = paths.jump_counts[:, k, :].astype(float) - marks.weights * dt
            mart = mart + np.sum((Lk - expm) * comp, axis=1)
        resid = (ce[:, k + 1] - ce[:, k]) + gen * dt - mart
        node_means[k] = resid.mean()
        node_ses[k] = resid.std(ddof=1) / np.sqrt(n)

    # terminal condition of the remaining-cost equation: the running
    # integral up to T is already consumed, so only the terminal maps appear
    y0 = paths.y[:, 0]
    phi_term = np.abs(ce[:, N] - (np.asarray(model.Phi(paths.x[:, N]), float) + np.asarray(model.Psi(y0), float)))
    grad = np.array(
        [
            partials(model, "Phi", "x", StatePoint(grid.T, float(xv), 0.0, 0.0, np.zeros(max(M, 1))), 0.0)
            for xv in paths.x[:, N]
        ]
    )
    phix_term = np.abs(ce[:, N] - (grad + np.asarray(model.Psi(y0), float)))
    return GeneratorResidualReport(
        node_means=node_means,
        node_ses=node_ses,
        terminal_mismatch=float(phi_term.mean()),
        terminal_mismatch_gradient_variant=float(phix_term.mean()),
    )


def estimate_martingale_loadings(ce_paths: np.ndarray, paths: PathBundle, basis: RegressionBasis = None):
    """Regression estimates of the certainty equivalent's martingale loadings.

    drift loading l_k ~ E[dLambda dW | F_k] / dt and jump loading
    L_ki ~ E[dLambda dN~_i | F_k] / (w_i dt), fitted on the backward
    solver's polynomial basis in (x_k, xi_k).
    """
    basis = basis if basis is not None else RegressionBasis()
    ce = np.asarray(ce_paths, dtype=float)
    grid, marks = paths.grid, paths.marks
    N, dt, M = grid.N, grid.dt, marks.M
    n = paths.n_paths
    l_hat = np.zeros((n, N + 1))
    L_hat = np.zeros((n, N + 1, M))
    for k in range(N):
        dce = ce[:, k + 1] - ce[:, k]
        targets = [dce * paths.dW[:, k]]
        if M:
            comp = paths.jump_counts[:, k, :].astype(float) - marks.weights * dt
            targets += [dce * comp[:, i] for i in range(M)]
        X = basis.design(paths.x[:, k], paths.xi[:, k])
        keep = [0] + [
            j for j in range(1, X.shape[1]) if np.std(X[:, j]) > 1e-12 * max(1.0, float(np.max(np.abs(X[:, j]))))
        ]
        sol, *_ = np.linalg.lstsq(X[:, keep], np.column_stack(targets), rcond=None)
        fitted = X[:, keep] @ sol
        l_hat[:, k] = fitted[:, 0] / dt
        for i in range(M):
            L_hat[:, k, i] = fitted[:, 1 + i] / (marks.weights[i] * dt)
    return l_hat, L_hat
