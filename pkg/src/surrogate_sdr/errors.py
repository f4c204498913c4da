"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """Input violates a documented precondition (shape, range, symmetry)."""


class NumericalDegeneracyError(ArithmeticError):
    """A matrix that must be invertible (or full rank) is numerically singular."""


class DegenerateMeasurementErrorError(NumericalDegeneracyError):
    """The corrected covariance could not be repaired to positive definite."""


class NonConvergenceError(RuntimeError):
    """An iterative procedure stopped without meeting its tolerance."""
