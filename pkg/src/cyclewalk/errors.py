"""Exception hierarchy.

The CLI maps these to exit codes: usage/config problems exit 2, numeric
problems exit 3.
"""


class CycleWalkError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class InvalidInput(CycleWalkError, ValueError):
    pass


class InvalidShape(InvalidInput):
    pass


class InvalidLaw(InvalidInput):
    pass


class InvalidGeometry(InvalidInput):
    pass


class InvalidConfig(InvalidInput):
    pass


class InvalidEnvironment(InvalidInput):
    pass


class InvalidCovariance(InvalidInput):
    pass


class OutOfRange(InvalidInput):
    pass


class SnapshotVersionError(InvalidInput):
    pass


class NumericFailure(CycleWalkError, ArithmeticError):
    exit_code = 3


class SolverFailure(NumericFailure):
    """Iterative solve did not reach tolerance; carries the best residual seen."""

    def __init__(self, message, best_residual=float("nan"), iterations=0):
        super().__init__(message)
        self.best_residual = best_residual
        self.iterations = iterations


class ConsistencyError(NumericFailure):
    """Two evaluations of the same quantity disagree beyond tolerance."""
