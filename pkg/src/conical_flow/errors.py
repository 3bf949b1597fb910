"""Exception hierarchy shared by all modules."""


class ConicalFlowError(Exception):
    """Base class for package errors."""


class InvalidGridError(ConicalFlowError, ValueError):
    """Grid parameters violate the grid invariants."""


class ShapeError(ConicalFlowError, ValueError):
    """Fields live on different grids or have the wrong length."""


class DomainError(ConicalFlowError, ValueError):
    """An argument lies outside the domain of a formula."""


class DegenerateMetricError(ConicalFlowError, ArithmeticError):
    """A metric density is nonpositive somewhere."""


class ConfigurationError(ConicalFlowError, ValueError):
    """Parameters admit no valid construction (for example no admissible k)."""


class ConventionError(ConicalFlowError, ArithmeticError):
    """A quantity that must be semi-positive came out negative."""


class StiffnessError(ConicalFlowError, RuntimeError):
    """The time step underflowed while trying to keep the metric positive."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoConvergenceError(ConicalFlowError, RuntimeError):
    """An iterative solver stagnated."""


class NumericError(ConicalFlowError, RuntimeError):
    """A numerical sub-problem (root find, eigensolve) failed."""


class IncompleteRunError(ConicalFlowError, ValueError):
    """A run lacks data required by a post-processing step."""


class RunFileError(ConicalFlowError, IOError):
    """A run file is truncated or malformed."""


class RunFileVersionError(RunFileError):
    """A run file carries an unsupported schema version."""
