"""Exception types shared across the package."""


class CommTrajError(Exception):
    """Base class for all package errors."""


class ParameterError(CommTrajError, ValueError):
    """A parameter is outside its valid domain."""


class DegenerateSegmentError(CommTrajError, ValueError):
    """A segment is too short for a well-conditioned Gramian."""


class ConditioningError(CommTrajError, ArithmeticError):
    """A linear system is too ill-conditioned to solve reliably."""

    def __init__(self, message, axis=None, tau=None):
        super().__init__(message)
        self.axis = axis
        self.tau = tau


class PlanningError(CommTrajError):
    """No depth produced a feasible plan."""

    def __init__(self, message, reasons=None):
        super().__init__(message)
        self.reasons = dict(reasons or {})


class ValidationFailure(CommTrajError):
    """The nonlinear closed-loop run left the attitude safety envelope."""

    def __init__(self, message, time=None):
        super().__init__(message if time is None else f"{message} at t={time:.4f} s")
        self.time = time


class ConfigError(CommTrajError, ValueError):
    """Invalid or unreadable run configuration."""
