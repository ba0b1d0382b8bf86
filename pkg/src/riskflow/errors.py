"""Exception hierarchy. Every error raised by the package derives from RiskflowError."""


class RiskflowError(Exception):
    pass


class ConfigurationError(RiskflowError):
    """Invalid static configuration (grids, mark sets, parameter ranges, config files)."""


class EvaluationError(RiskflowError):
    """A user-supplied coefficient evaluator returned a non-finite value."""


class SimulationError(RiskflowError):
    """Path simulation produced NaN/overflow; message carries path id, node and coefficient."""


class SolverError(RiskflowError):
    """Regression or coupling iteration failed; may carry a .report attribute."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class StatisticsError(RiskflowError):
    """Not enough (or non-finite) samples for a Monte Carlo estimate."""


class NumericError(RiskflowError):
    """Overflow / blow-up / loss of positivity in a numerical routine."""


class UsageError(RiskflowError):
    """API called with inconsistent or missing inputs."""
