"""riskflow: risk-sensitive control of coupled forward-backward jump diffusions."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    CoefficientModel,
    ControlPolicy,
    MarkSet,
    RiskParams,
    StatePoint,
    TimeGrid,
    build_grid,
    constant_policy,
    partials,
    validate_mark_set,
)
from .engine import (  # noqa: F401
    Draws,
    JumpLedger,
    MCEstimate,
    PathBundle,
    make_draws,
    mc_estimate,
    sample_jumps,
    simulate_forward,
)
from .backward import (  # noqa: F401
    CouplingReport,
    apply_backward_fit,
    RegressionBasis,
    martingale_residuals,
    picard_couple,
    solve_backward,
)
from .risk import (  # noqa: F401
    CostOutcome,
    GirsanovPaths,
    cost_J_theta,
    expansion_residual,
    girsanov_density,
    nested_v_theta,
    quadratic_generator_residual,
    risk_loss,
    theta_T,
    v_theta,
    v_theta_bounds,
)
from .adjoint import (  # noqa: F401
    AdjointBundle,
    HamiltonianInput,
    hamiltonian,
    hamiltonian_control_derivative,
    hamiltonian_control_gap,
    simulate_transformed_adjoints_example,
    sufficient_condition_probe,
)
from .cashflow import (  # noqa: F401
    PRINTED,
    SELF_CONSISTENT,
    CashflowParams,
    RiccatiSolution,
    feedback_control,
    g_of_t,
    hara_cashflow_model,
    mean_variance_model,
    riccati_policy,
    run_mean_variance_experiment,
    solve_A,
    solve_B,
    solve_psi_phi,
    solve_riccati,
)
from .errors import (  # noqa: F401
    ConfigurationError,
    EvaluationError,
    NumericError,
    RiskflowError,
    SimulationError,
    SolverError,
    StatisticsError,
    UsageError,
)
from .rng import RngSpec  # noqa: F401
