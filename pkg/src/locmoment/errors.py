"""Exception hierarchy shared by all modules.

Configuration problems derive from ``ConfigError`` (CLI exit code 2),
numerical failures from ``NumericalError`` (CLI exit code 3).
"""


class ConfigError(ValueError):
    """Invalid specification, parameters or geometry."""


class NumericalError(RuntimeError):
    """A computation could not be carried out to the requested accuracy."""


class SingularSolveError(NumericalError):
    """Resolvent requested at (numerically) an eigenvalue with zero regularization."""

    def __init__(self, message, nearest_eigenvalue=None):
        super().__init__(message)
        self.nearest_eigenvalue = nearest_eigenvalue


class ConvergenceError(NumericalError):
    """Adaptive refinement did not converge; carries the last two estimates."""

    def __init__(self, message, estimates=()):
        super().__init__(message)
        self.estimates = tuple(estimates)
