"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the domain of a map (singular matrix, point at infinity)."""


class DegeneracyError(ValueError):
    """A fit or Jacobian is rank-deficient."""


class ConditioningError(ValueError):
    """A change-of-basis matrix is too ill-conditioned to invert reliably."""


class CalibrationError(RuntimeError):
    """Convention calibration found zero or several consistent candidates."""


class CoverageError(ValueError):
    """A descriptor window touches invalid or out-of-bounds pixels."""
