"""Exception types shared across the solver."""


class NumericsError(Exception):
    """Base class for numerical failures (CLI exit code 2)."""


class ConfigError(Exception):
    """Invalid configuration or CLI usage (exit code 1)."""


class InvalidDomainError(NumericsError):
    """Degenerate or otherwise unusable computational domain."""


class InvalidStepError(NumericsError):
    """Nonpositive or otherwise inadmissible time step."""


class GeometryError(NumericsError):
    """Point location or other mesh-geometry failure."""


class SolverFailure(NumericsError):
    """Direct factorization or linear-solve failure."""


class IterativeFailure(SolverFailure):
    """Krylov solver breakdown or stagnation.

    Carries the residual history of the failed run in ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class DegeneratePredictorError(NumericsError):
    """Extrapolated magnetization vanished at a node; retry with smaller step."""


class StepFailureError(NumericsError):
    """A time step produced an unusable state (degenerate or nonfinite)."""


class ToleranceUnreachableError(NumericsError):
    """Spatial refinement loop hit its iteration guard above tolerance."""

    def __init__(self, message, best_total):
        super().__init__(message)
        self.best_total = best_total
