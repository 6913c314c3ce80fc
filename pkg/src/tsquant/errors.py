"""Exception hierarchy shared by every tsquant module."""


class TsQuantError(Exception):
    """Base class for all errors raised by tsquant."""


class ShapeError(TsQuantError, ValueError):
    pass


class RankError(TsQuantError, ValueError):
    pass


class DomainError(TsQuantError, ValueError):
    pass


class ConvergenceError(TsQuantError, RuntimeError):
    """Iterative routine hit its sweep cap.

    Attributes:
        residual: largest off-diagonal measure reached when iteration stopped.
    """

    def __init__(self, message, residual):
        super().__init__(f"{message} (achieved residual {residual:.3e})")
        self.residual = residual


class DefinitenessError(TsQuantError, ValueError):
    """Matrix is not symmetric positive definite.

    Attributes:
        pivot: index of the failing pivot, or None for a symmetry failure.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class CalibrationError(TsQuantError, ValueError):
    """Calibration data is missing or does not cover the requested keys."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class CoverageError(CalibrationError):
    pass


class CalibrationEmptyError(CalibrationError):
    pass


class PolicyIncompleteError(TsQuantError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "policy incomplete"


class RangeError(TsQuantError, ValueError):
    pass


class FormatError(TsQuantError, ValueError):
    pass


class IntegrityError(FormatError):
    pass
