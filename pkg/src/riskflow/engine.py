"""Forward simulation of the controlled jump-diffusion system.

First-order (Euler) scheme. Per step, coefficients are frozen at the left
node (the left-limit convention for the jump coefficient), jumps within the
step are all applied via the ledger, and the compensator is subtracted as the
drift term ``dt * sum_i w_i gamma(.., lam_i)``, which is the exact
finite-activity discretization of the compensated jump integral.

One normal draw per step per path; jump randomness lives on independent
substreams so a jump-free run consumes exactly the same normals as a
pure-Brownian reference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .core import CoefficientModel, ControlPolicy, MarkSet, TimeGrid
from .errors import SimulationError, StatisticsError, UsageError
from .rng import JUMP_MARKS, JUMP_TIMES, RngSpec

Source = Union[None, np.ndarray]


@dataclass(frozen=True)
class JumpLedger:
    """Jump record for one path: sorted times in (0, T] and the mark index of each jump."""

    times: np.ndarray
    mark_idx: np.ndarray


@dataclass
class PathBundle:
    """Discretized trajectories for a batch of paths.

    Shapes: x, y, z, xi, u are (n_paths, N+1); r is (n_paths, N+1, M);
    dW is (n_paths, N); jump_counts is (n_paths, N, M) with the number of
    mark-i jumps inside each step. u[:, N] repeats the last applied control
    so every node has a value in dumps.
    """

    grid: TimeGrid
    marks: MarkSet
    seed: int
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    r: np.ndarray
    xi: np.ndarray
    u: np.ndarray
    dW: np.ndarray
    jump_counts: np.ndarray
    ledgers: Optional[list] = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]


def sample_jumps(marks: MarkSet, grid: TimeGrid, rng: RngSpec, path_index: int) -> JumpLedger:
    """Poisson(total_intensity * T) jumps, times uniform on (0, T], marks categorical w_i / Lambda."""
    if marks.M == 0:
        return JumpLedger(times=np.empty(0), mark_idx=np.empty(0, dtype=np.int64))
    gen = rng.stream(JUMP_TIMES, path_index)
    n = int(gen.poisson(marks.total_intensity * grid.T))
    times = np.sort(grid.T * (1.0 - gen.random(n)))  # uniform on (0, T]
    probs = marks.weights / marks.total_intensity
    mark_idx = rng.stream(JUMP_MARKS, path_index).choice(marks.M, size=n, p=probs)
    return JumpLedger(times=times, mark_idx=mark_idx.astype(np.int64))


def _bin_jumps(ledger: JumpLedger, grid: TimeGrid, M: int) -> np.ndarray:
    """Per-step, per-mark jump counts for one path (times tau in (t_k, t_{k+1}] go to step k)."""
    counts = np.zeros((grid.N, M), dtype=np.uint16)
    if len(ledger.times):
        steps = np.clip(np.ceil(ledger.times / grid.dt).astype(np.int64) - 1, 0, grid.N - 1)
        np.add.at(counts, (steps, ledger.mark_idx), 1)
    return counts


def _resolve_source(src: Source, shape, what: str) -> np.ndarray:
    if src is None:
        return np.zeros(shape)
    arr = np.asarray(src, dtype=float)
    if arr.shape != shape:
        raise UsageError(f"{what} source has shape {arr.shape}, expected {shape}")
    return arr.copy()


@dataclass(frozen=True)
class Draws:
    """Precomputed randomness for one (grid, marks, seed, n_paths) block.

    Reusing a Draws object across policy evaluations gives explicit common
    random numbers; regenerating from the same RngSpec yields identical
    content, so caching is purely a speed concern.
    """

    seed: int
    dW: np.ndarray
    jump_counts: np.ndarray
    ledgers: Optional[list]


def make_draws(grid: TimeGrid, marks: MarkSet, rng: RngSpec, n_paths: int, keep_ledgers: bool = False) -> Draws:
    """Generate the per-path Brownian increments and binned jump counts."""
    N, M = grid.N, marks.M
    normals = np.empty((n_paths, N))
    for p in range(n_paths):
        normals[p] = rng.brownian_normals(p, N)
    dW = normals * np.sqrt(grid.dt)
    jump_counts = np.zeros((n_paths, N, M), dtype=np.uint16)
    ledgers = [] if (keep_ledgers and M > 0) else None
    if M > 0:
        for p in range(n_paths):
            ledger = sample_jumps(marks, grid, rng, p)
            jump_counts[p] = _bin_jumps(ledger, grid, M)
            if ledgers is not None:
                ledgers.append(ledger)
    return Draws(seed=rng.master_seed, dW=dW, jump_counts=jump_counts, ledgers=ledgers)


def simulate_forward(
    model: CoefficientModel,
    policy: ControlPolicy,
    grid: TimeGrid,
    marks: MarkSet,
    rng: RngSpec,
    n_paths: int,
    x0: float,
    y_source: Source = None,
    z_source: Source = None,
    r_source: Source = None,
    keep_ledgers: bool = False,
    draws: Optional[Draws] = None,
) -> PathBundle:
    """Euler step the forward state x and the running cost integral xi.

    The backward quantities (y, z, r) are inputs here: per-node arrays from a
    previous backward solve, or None for zeros (decoupled models). They are
    copied into the returned bundle so downstream cost evaluations see the
    values actually used.
    """
    N, dt, M = grid.N, grid.dt, marks.M
    n_paths = int(n_paths)
    if n_paths < 1:
        raise UsageError("n_paths must be >= 1")

    y = _resolve_source(y_source, (n_paths, N + 1), "y")
    z = _resolve_source(z_source, (n_paths, N + 1), "z")
    r = _resolve_source(r_source, (n_paths, N + 1, M), "r")

    if draws is None:
        draws = make_draws(grid, marks, rng, n_paths, keep_ledgers=keep_ledgers)
    if draws.dW.shape != (n_paths, N) or draws.seed != rng.master_seed:
        raise UsageError("draws were generated for a different (seed, n_paths, grid) block")
    dW = draws.dW
    jump_counts = draws.jump_counts
    ledgers = draws.ledgers

    x = np.empty((n_paths, N + 1))
    xi = np.empty((n_paths, N + 1))
    u = np.empty((n_paths, N + 1))
    x[:, 0] = x0
    xi[:, 0] = 0.0
    clamp_count = 0

    def check(name, arr, k):
        bad = ~np.isfinite(arr)
        if bad.any():
            p = int(np.argmax(bad))
            raise SimulationError(
                f"coefficient {name!r} produced a non-finite value at path {p}, node {k} (t={grid.nodes[k]:.6g})"
            )

    for k in range(N):
        t = grid.nodes[k]
        xk, yk, zk, rk = x[:, k], y[:, k], z[:, k], r[:, k, :]
        raw = np.asarray(policy.raw(k, t, xk, yk, rk), dtype=float)
        uk = np.clip(raw, policy.u_min, policy.u_max)
        clamp_count += int(np.count_nonzero(raw != uk))
        u[:, k] = uk

        bk = np.broadcast_to(np.asarray(model.b(t, xk, yk, zk, rk, uk), dtype=float), xk.shape)
        sk = np.broadcast_to(np.asarray(model.sigma(t, xk, yk, zk, rk, uk), dtype=float), xk.shape)
        fk = np.broadcast_to(np.asarray(model.f(t, xk, yk, zk, rk, uk), dtype=float), xk.shape)
        check("b", bk, k)
        check("sigma", sk, k)
        check("f", fk, k)

        incr = bk * dt + sk * dW[:, k]
        if M > 0:
            for i in range(M):
                gam_i = np.broadcast_to(
                    np.asarray(model.gamma(t, xk, yk, zk, rk, uk, marks.marks[i]), dtype=float), xk.shape
                )
                check("gamma", gam_i, k)
                incr = incr + gam_i * (jump_counts[:, k, i].astype(float) - marks.weights[i] * dt)
        x[:, k + 1] = xk + incr
        check("x", x[:, k + 1], k + 1)
        xi[:, k + 1] = xi[:, k] + fk * dt

    u[:, N] = u[:, N - 1] if N > 0 else 0.0

    return PathBundle(
        grid=grid,
        marks=marks,
        seed=rng.master_seed,
        x=x,
        y=y,
        z=z,
        r=r,
        xi=xi,
        u=u,
        dW=dW,
        jump_counts=jump_counts,
        ledgers=ledgers,
        metadata={"clamp_count": clamp_count, "x0": float(x0), "model": model.name},
    )


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    se: float
    ci_low: float
    ci_high: float
    n: int


_Z95 = 1.959963984540054


def mc_estimate(samples) -> MCEstimate:
    """Sample mean with standard error and 95% CI; deterministic pairwise summation."""
    a = np.asarray(samples, dtype=float).ravel()
    if a.size < 2:
        raise StatisticsError(f"need at least 2 samples, got {a.size}")
    if not np.all(np.isfinite(a)):
        raise StatisticsError("samples contain non-finite values")
    mean = float(np.sum(a) / a.size)
    sd = float(np.sqrt(np.sum((a - mean) ** 2) / (a.size - 1)))
    se = float(sd / np.sqrt(a.size))
    return MCEstimate(mean=mean, se=se, ci_low=mean - _Z95 * se, ci_high=mean + _Z95 * se, n=int(a.size))
