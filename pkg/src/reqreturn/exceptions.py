"""Exception hierarchy.

Two families matter to callers: :class:`DataError` for inputs that violate a
contract (bad prices, misaligned panels, missing covariates) and
:class:`NumericalError` for estimation failures (singular matrices, empty
regimes, likelihood decreases). The CLI maps them to exit codes 2 and 3.
"""


class ReqReturnError(Exception):
    """Base class for all package errors."""


class DataError(ReqReturnError, ValueError):
    """Input data violates a precondition."""

    def __init__(self, message, *, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row!r}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class MissingCovariatesError(DataError):
    """Future covariates needed for a forecast were not supplied."""


class NumericalError(ReqReturnError, ArithmeticError):
    """An estimation step could not be carried out numerically."""


class SingularCovarianceError(NumericalError):
    """A covariance matrix is singular or not positive definite."""


class RankDeficiencyError(NumericalError):
    """A Gram / design matrix is not invertible."""


class DegeneracyError(NumericalError):
    """Probabilities degenerate (all densities underflow, 0/0 with mass)."""


class EmptyRegimeError(NumericalError):
    """A regime received (numerically) zero smoothed probability mass."""


class ConsistencyError(NumericalError):
    """An internal invariant failed, e.g. an EM step lowered the likelihood."""


class NonErgodicError(NumericalError):
    """The transition matrix has no unique stationary distribution."""


class ConditioningError(NumericalError):
    """A posterior scale matrix lost positive definiteness."""
