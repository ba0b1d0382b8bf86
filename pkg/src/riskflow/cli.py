"""Configuration loading, experiment orchestration, deterministic result emission.

Config files are JSON (schema documented in docs/config_schema.md); unknown
keys are rejected by name. Results serialize through a canonical writer
(sorted keys, floats at 17 significant digits, non-finite values nulled with
a reason) whose SHA-256 over the non-volatile fields is the determinism
hash: identical config + seed must reproduce it bit for bit, regardless of
the worker count advertised through RISKFLOW_THREADS.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .backward import RegressionBasis, martingale_residuals, picard_couple
from .cashflow import (
    PRINTED,
    SELF_CONSISTENT,
    CashflowParams,
    hara_cashflow_model,
    run_mean_variance_experiment,
)
from .core import CoefficientModel, build_grid, constant_policy, validate_mark_set
from .engine import mc_estimate, simulate_forward
from .errors import ConfigurationError, RiskflowError
from .risk import GirsanovPaths, cost_J_theta, expansion_residual, girsanov_density, theta_T
from .rng import RngSpec

_VOLATILE_KEYS = {"timestamp", "wall_time_s"}

DEFAULTS = {"grid": {"T": 1.0, "N": 1000}, "mc": {"n_paths": 10_000, "seed": 20240601}, "theta": 0.5}

_SCHEMA = {
    "experiment": None,
    "theta": None,
    "grid": {"T", "N"},
    "mc": {"n_paths", "seed"},
    "model": {
        "rho", "c", "sigma", "disc_rate", "a", "m0", "y_terminal",
        "marks", "u_min", "u_max",
        "preset", "mu", "short_rate", "payout_rate", "drift", "x0", "terminal_a", "g_slope",
    },
    "options": {
        "convention", "probe", "probe_theta", "probe_eps", "probe_paths",
        "pilot_paths", "pilot_max_iter", "pilot_damping", "pilot_tol",
        "picard_max_iter", "picard_tol", "basis_degree", "foc_paths",
        "model_theta_probe", "density_paths",
    },
    "output": {"dir", "dump_paths", "plot_data"},
}

_EXPERIMENTS = ("cashflow", "generic_fbsde", "property_suite")


@dataclass
class ExperimentConfig:
    experiment: str
    theta: float
    grid: dict
    mc: dict
    model: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        return {
            "experiment": self.experiment,
            "theta": self.theta,
            "grid": dict(self.grid),
            "mc": dict(self.mc),
            "model": dict(self.model),
            "options": dict(self.options),
            "output": dict(self.output),
        }


def _check_keys(section: str, given: dict, allowed: set):
    for key in given:
        if key not in allowed:
            raise ConfigurationError(f"unknown key {key!r} in config section {section!r}")


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a JSON config file, resolving defaults."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be an object")
    _check_keys("(root)", raw, set(_SCHEMA))
    experiment = raw.get("experiment", "cashflow")
    if experiment not in _EXPERIMENTS:
        raise ConfigurationError(f"unknown experiment {experiment!r}; choose from {_EXPERIMENTS}")
    grid = {**DEFAULTS["grid"], **raw.get("grid", {})}
    mc = {**DEFAULTS["mc"], **raw.get("mc", {})}
    theta = raw.get("theta", DEFAULTS["theta"])
    model = dict(raw.get("model", {}))
    options = dict(raw.get("options", {}))
    output = dict(raw.get("output", {}))
    _check_keys("grid", grid, _SCHEMA["grid"])
    _check_keys("mc", mc, _SCHEMA["mc"])
    _check_keys("model", model, _SCHEMA["model"])
    _check_keys("options", options, _SCHEMA["options"])
    _check_keys("output", output, _SCHEMA["output"])
    if float(theta) <= 0:
        raise ConfigurationError(f"theta must be positive, got {theta}")
    if "sigma" in model and float(model["sigma"]) <= 0:
        raise ConfigurationError(f"model key 'sigma' must be positive, got {model['sigma']}")
    if float(grid["T"]) <= 0 or int(grid["N"]) < 1:
        raise ConfigurationError("grid requires T > 0 and N >= 1")
    if int(mc["n_paths"]) < 2:
        raise ConfigurationError("mc.n_paths must be >= 2")
    return ExperimentConfig(
        experiment=experiment, theta=float(theta), grid=grid, mc=mc,
        model=model, options=options, output=output,
    )


def _marks_from_model(model: dict):
    marks = model.get("marks", {"values": [], "weights": []})
    return validate_mark_set(marks.get("values", []), marks.get("weights", []))


def _cashflow_params(cfg: ExperimentConfig) -> CashflowParams:
    m = cfg.model
    return CashflowParams(
        rho=float(m.get("rho", 0.2)),
        c=float(m.get("c", 0.1)),
        sigma=float(m.get("sigma", 0.3)),
        disc_rate=float(m.get("disc_rate", 0.05)),
        theta=cfg.theta,
        a=float(m.get("a", 1.0)),
        m0=float(m.get("m0", 1.0)),
        y_terminal=float(m.get("y_terminal", 0.0)),
        marks=_marks_from_model(m),
        u_min=float(m.get("u_min", -np.inf)),
        u_max=float(m.get("u_max", np.inf)),
    )


def _run_cashflow(cfg: ExperimentConfig) -> dict:
    params = _cashflow_params(cfg)
    grid = build_grid(float(cfg.grid["T"]), int(cfg.grid["N"]))
    o = cfg.options
    return run_mean_variance_experiment(
        params, grid, int(cfg.mc["n_paths"]), int(cfg.mc["seed"]),
        convention=o.get("convention", SELF_CONSISTENT),
        basis_degree=int(o.get("basis_degree", 2)),
        pilot_paths=int(o.get("pilot_paths", 4000)),
        pilot_max_iter=int(o.get("pilot_max_iter", 15)),
        pilot_damping=float(o.get("pilot_damping", 0.5)),
        pilot_tol=float(o.get("pilot_tol", 1e-4)),
        picard_max_iter=int(o.get("picard_max_iter", 8)),
        picard_tol=float(o.get("picard_tol", 1e-3)),
        probe=bool(o.get("probe", True)),
        probe_theta=float(o.get("probe_theta", 0.02)),
        probe_eps=tuple(o.get("probe_eps", (-0.25, -0.1, 0.1, 0.25))),
        probe_paths=o.get("probe_paths"),
        foc_paths=int(o.get("foc_paths", 100)),
        model_theta_probe=bool(o.get("model_theta_probe", False)),
    )


def _generic_model(cfg: ExperimentConfig) -> CoefficientModel:
    m = cfg.model
    preset = m.get("preset", "hara_cashflow")
    if preset == "hara_cashflow":
        return hara_cashflow_model(
            mu=float(m.get("mu", 0.08)),
            short_rate=float(m.get("short_rate", 0.02)),
            payout_rate=float(m.get("payout_rate", 0.1)),
            sigma=float(m.get("sigma", 0.3)),
            theta=cfg.theta,
            disc_rate=float(m.get("disc_rate", 0.05)),
        )
    if preset == "linear_gaussian":
        drift = float(m.get("drift", 0.1))
        sigma = float(m.get("sigma", 0.2))
        slope = float(m.get("g_slope", 0.5))
        return CoefficientModel(
            b=lambda t, x, y, z, r, v: drift + 0.0 * x,
            sigma=lambda t, x, y, z, r, v: sigma + 0.0 * x,
            g=lambda t, x, y, z, r, v: slope * x,
            f=lambda t, x, y, z, r, v: 0.0 * x,
            Phi=lambda x: 0.0 * x,
            Psi=lambda y: 0.0 * y,
            name="linear_gaussian",
        )
    raise ConfigurationError(f"unknown model preset {preset!r}")


def _run_generic(cfg: ExperimentConfig) -> dict:
    model = _generic_model(cfg)
    grid = build_grid(float(cfg.grid["T"]), int(cfg.grid["N"]))
    marks = _marks_from_model(cfg.model)
    rng = RngSpec(int(cfg.mc["seed"]))
    o = cfg.options
    policy = constant_policy(float(cfg.model.get("drift", 1.0)) if "drift" in cfg.model else 1.0)
    bundle, coupling = picard_couple(
        model, policy, grid, marks, rng, int(cfg.mc["n_paths"]),
        float(cfg.model.get("x0", 1.0)), float(cfg.model.get("terminal_a", 0.0)),
        basis=RegressionBasis(int(o.get("basis_degree", 2))),
        max_iter=int(o.get("picard_max_iter", 8)), tol=float(o.get("picard_tol", 1e-3)),
    )
    samples = theta_T(bundle, model)
    cost = cost_J_theta(samples, cfg.theta)
    resid_mean, resid_se = martingale_residuals(bundle, model)
    within = np.abs(resid_mean) <= 3.0 * resid_se + 1e-14
    return {
        "experiment": "generic_fbsde",
        "model": model.name,
        "coupling": {"iterations": coupling.iterations, "converged": coupling.converged,
                     "deltas": coupling.combined()},
        "J_theta": {"value": cost.estimate.mean, "se": cost.estimate.se,
                    "ci": [cost.estimate.ci_low, cost.estimate.ci_high],
                    "risk_loss": cost.risk_loss},
        "y0": {"value": float(bundle.y[:, 0].mean()), "se": float(bundle.y[:, 0].std(ddof=1) / np.sqrt(bundle.n_paths))},
        "martingale_residuals": {
            "max_abs_mean": float(np.max(np.abs(resid_mean))),
            "nodes_within_3se": int(np.count_nonzero(within)),
            "nodes": int(len(resid_mean)),
            "verdict": "pass" if bool(np.all(within)) else "fail",
        },
        "clamp_count": bundle.metadata.get("clamp_count", 0),
    }


def _run_property_suite(cfg: ExperimentConfig) -> dict:
    """Fast self-checks: density martingales and the small-theta expansion slope."""
    grid = build_grid(float(cfg.grid["T"]), min(int(cfg.grid["N"]), 50))
    rng = RngSpec(int(cfg.mc["seed"]))
    n = int(cfg.options.get("density_paths", min(int(cfg.mc["n_paths"]), 20000)))
    zero_model = CoefficientModel(
        b=lambda t, x, y, z, r, v: 0.0 * x,
        sigma=lambda t, x, y, z, r, v: 0.0 * x,
        g=lambda t, x, y, z, r, v: 0.0 * x,
        f=lambda t, x, y, z, r, v: 0.0 * x,
        Phi=lambda x: 0.0 * x,
        Psi=lambda y: 0.0 * y,
        gamma=lambda t, x, y, z, r, v, lam: 0.0 * x,
        name="driver_only",
    )
    checks = {}
    configs = {
        "diffusion": (validate_mark_set([], []), 0.3, 0.0),
        "jump": (validate_mark_set([0.5], [2.0]), 0.0, 0.4),
        "mixed": (validate_mark_set([0.5], [2.0]), 0.3, 0.4),
    }
    for name, (marks, l_const, L_const) in configs.items():
        bundle = simulate_forward(zero_model, constant_policy(0.0), grid, marks, rng, n, 0.0)
        gp = GirsanovPaths(
            drift_load=np.full(grid.N + 1, l_const),
            jump_load=np.full((grid.N + 1, marks.M), L_const),
        )
        dens = girsanov_density(gp, cfg.theta, bundle)
        est = mc_estimate(dens[:, -1])
        ok = abs(est.mean - 1.0) <= 3.0 * est.se
        checks[name] = {"mean": est.mean, "se": est.se, "verdict": "pass" if ok else "fail"}

    p = 0.25
    thetas = np.array([0.05, 0.1, 0.2, 0.4])
    mean, var = p, p * (1 - p)
    exact = np.log1p(p * np.expm1(thetas)) / thetas  # closed-form certainty equivalent, Bernoulli(p)
    residuals = exact - (mean + thetas / 2.0 * var)
    slope = float(np.polyfit(np.log(thetas), np.log(np.abs(residuals)), 1)[0])
    checks["expansion_slope"] = {"slope": slope, "verdict": "pass" if 1.7 <= slope <= 2.3 else "fail"}
    verdict = all(c["verdict"] == "pass" for c in checks.values())
    return {"experiment": "property_suite", "checks": checks,
            "verdict": "pass" if verdict else "fail"}


def _float_repr(x: float) -> str:
    if x != x:
        return "null"
    if x in (float("inf"), float("-inf")):
        return "null"
    return format(x, ".17g")


def _sanitize(obj, trail="value"):
    """Replace non-finite floats by null plus a reason; normalize numpy types."""
    if isinstance(obj, dict):
        out = {}
        for k, v in sorted(obj.items()):
            cleaned = _sanitize(v, trail=str(k))
            if isinstance(v, float) and not np.isfinite(v):
                out[str(k)] = None
                out[f"{k}_null_reason"] = "nan" if v != v else ("+inf" if v > 0 else "-inf")
            else:
                out[str(k)] = cleaned
        return out
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return _sanitize(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def canonical_json(obj) -> str:
    """Deterministic serialization: sorted keys, 17-significant-digit floats."""

    def render(o):
        if o is None:
            return "null"
        if isinstance(o, bool):
            return "true" if o else "false"
        if isinstance(o, int):
            return str(o)
        if isinstance(o, float):
            return _float_repr(o)
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, dict):
            items = ", ".join(f"{json.dumps(str(k))}: {render(v)}" for k, v in sorted(o.items()))
            return "{" + items + "}"
        if isinstance(o, (list, tuple)):
            return "[" + ", ".join(render(v) for v in o) + "]"
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return render(_sanitize(obj))


def determinism_hash(result: dict) -> str:
    stable = {k: v for k, v in result.items() if k not in _VOLATILE_KEYS and k != "determinism_hash"}
    return hashlib.sha256(canonical_json(stable).encode()).hexdigest()


def _git_stamp() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except Exception:
        return "unknown"


def run(config: ExperimentConfig, overrides: dict = None) -> tuple:
    """Execute the configured experiment; returns (result dict, exit code)."""
    overrides = overrides or {}
    cfg = config_from_dict(_apply_overrides(config.resolved(), overrides))
    t0 = time.time()
    if cfg.experiment == "cashflow":
        body = _run_cashflow(cfg)
    elif cfg.experiment == "generic_fbsde":
        body = _run_generic(cfg)
    else:
        body = _run_property_suite(cfg)
    wall = time.time() - t0

    result = {
        "config": cfg.resolved(),
        "version": __version__,
        "git": _git_stamp(),
        "threads": os.environ.get("RISKFLOW_THREADS", "0"),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "wall_time_s": wall,
        **body,
    }
    result = _sanitize(result)
    result["determinism_hash"] = determinism_hash(result)

    exit_code = 0
    for key in ("necessary_condition", "sufficient_probe", "martingale_residuals"):
        entry = result.get(key)
        if isinstance(entry, dict) and entry.get("verdict") not in (None, "pass", "consistent with optimality"):
            exit_code = 2
    if result.get("verdict") == "fail":
        exit_code = 2
    return result, exit_code


def _apply_overrides(resolved: dict, overrides: dict) -> dict:
    out = json.loads(json.dumps(resolved))
    if overrides.get("experiment") is not None:
        out["experiment"] = overrides["experiment"]
    if overrides.get("seed") is not None:
        out["mc"]["seed"] = int(overrides["seed"])
    if overrides.get("paths") is not None:
        out["mc"]["n_paths"] = int(overrides["paths"])
    if overrides.get("steps") is not None:
        out["grid"]["N"] = int(overrides["steps"])
    if overrides.get("theta") is not None:
        out["theta"] = float(overrides["theta"])
    return out


def _dump_paths_csv(bundle, path):
    M = bundle.marks.M
    header = "path,k,t,x,y,z," + ",".join(f"r_{i}" for i in range(M)) + ("," if M else "") + "xi,u"
    with open(path, "w") as fh:
        fh.write(header.replace(",,", ",") + "\n")
        for p in range(bundle.n_paths):
            for k in range(bundle.grid.N + 1):
                r_cols = "".join(f",{bundle.r[p, k, i]:.17g}" for i in range(M))
                fh.write(
                    f"{p},{k},{bundle.grid.nodes[k]:.17g},{bundle.x[p, k]:.17g},{bundle.y[p, k]:.17g},"
                    f"{bundle.z[p, k]:.17g}{r_cols},{bundle.xi[p, k]:.17g},{bundle.u[p, k]:.17g}\n"
                )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="riskflow", description="Run risk-sensitive control experiments")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--experiment", choices=_EXPERIMENTS)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--paths", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--theta", type=float)
    parser.add_argument("--out", help="output directory (default: current)")
    parser.add_argument("--dump-paths", action="store_true", help="write the trajectory CSV")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config) if args.config else config_from_dict({})
        overrides = {
            "experiment": args.experiment, "seed": args.seed, "paths": args.paths,
            "steps": args.steps, "theta": args.theta,
        }
        if args.dump_paths:
            cfg.output["dump_paths"] = True
        result, code = run(cfg, overrides)
    except RiskflowError as exc:
        print(f"error [{type(exc).__module__.split('.')[-1]}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1

    out_dir = args.out or cfg.output.get("dir") or "."
    os.makedirs(out_dir, exist_ok=True)
    result_path = os.path.join(out_dir, f"{result['config']['experiment']}_result.json")
    with open(result_path, "w") as fh:
        fh.write(canonical_json(result))
        fh.write("\n")

    if result["config"]["experiment"] == "cashflow" and (cfg.output.get("plot_data", True)):
        _write_plot_data(result, cfg, out_dir)

    if not args.quiet:
        print(f"result written to {result_path}")
        print(f"determinism hash: {result['determinism_hash']}")
        for key in ("necessary_condition", "sufficient_probe"):
            if key in result and isinstance(result[key], dict):
                print(f"{key}: {result[key].get('verdict')}")
    return code


def _write_plot_data(result, cfg, out_dir):
    # re-derive the deterministic trajectories cheaply for the plot CSV
    from .cashflow import mean_variance_model, riccati_policy, solve_riccati

    params = _cashflow_params(config_from_dict(result["config"]))
    grid = build_grid(float(result["config"]["grid"]["T"]), int(result["config"]["grid"]["N"]))
    convention = result["config"]["options"].get("convention", SELF_CONSISTENT)
    y0 = result["y0_pin"]
    riccati = solve_riccati(params, grid, y0, convention=convention)
    model = mean_variance_model(params, y0, convention=convention)
    rng = RngSpec(int(result["config"]["mc"]["seed"]))
    bundle, _ = picard_couple(
        model, riccati_policy(params, riccati), grid, params.marks, rng,
        min(int(result["config"]["mc"]["n_paths"]), 2000), params.m0, params.y_terminal,
        basis=RegressionBasis(2), max_iter=6, tol=1e-3,
    )
    path = os.path.join(out_dir, "cashflow_plot_data.csv")
    with open(path, "w") as fh:
        fh.write("t,A,B,psi,phi,mean_x,mean_y,mean_u\n")
        for k in range(grid.N + 1):
            fh.write(
                f"{grid.nodes[k]:.17g},{riccati.a[k]:.17g},{riccati.b[k]:.17g},"
                f"{riccati.psi[k]:.17g},{riccati.phi[k]:.17g},"
                f"{bundle.x[:, k].mean():.17g},{bundle.y[:, k].mean():.17g},{bundle.u[:, k].mean():.17g}\n"
            )
    if cfg.output.get("dump_paths"):
        _dump_paths_csv(bundle, os.path.join(out_dir, "cashflow_paths.csv"))


if __name__ == "__main__":
    sys.exit(main())
