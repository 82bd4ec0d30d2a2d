"""Exception hierarchy shared by all jointsvd modules."""


class JointSVDError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(JointSVDError, ValueError):
    """Array extents do not satisfy an operation's shape contract."""


class RankError(JointSVDError, ValueError):
    """Requested rank lies outside the admissible range."""


class ConvergenceError(JointSVDError, ArithmeticError):
    """The SVD kernel failed to converge."""


class RankDeficiencyError(JointSVDError, ArithmeticError):
    """A least-squares system is numerically rank deficient."""

    def __init__(self, message, condition_number):
        super().__init__(message)
        self.condition_number = condition_number


class CompatibilityError(JointSVDError, ValueError):
    """Group members cannot be stacked for the requested method."""


class BudgetError(JointSVDError, ValueError):
    """Rank planning or parameter accounting failed."""


class InfeasibleTargetError(BudgetError):
    """A target compression factor cannot be reached even at rank 1."""


class ManifestError(JointSVDError, ValueError):
    """A model manifest is malformed or inconsistent with its payloads."""
