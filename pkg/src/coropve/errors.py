"""Exception hierarchy.

Data errors (malformed inputs, bad geometry) and numerical failures are kept
apart so the command line can map them to distinct exit codes.
"""


class CoroPVEError(Exception):
    """Base class for all package errors."""


class DataError(CoroPVEError, ValueError):
    pass


class NumericalError(CoroPVEError, ArithmeticError):
    pass


class FormatError(DataError):
    pass


class SpecError(DataError):
    pass


class DegenerateTangent(DataError):
    pass


class TopologyError(DataError):
    pass


class LocationError(DataError):
    pass


class LengthMismatch(DataError):
    pass


class DimMismatch(DataError):
    pass


class EmptyDatabase(DataError):
    pass


class EmptySurface(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class NoPeak(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class AllOutliers(NumericalError):
    pass


class InsufficientRange(NumericalError):
    pass


class NoConvergence(NumericalError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DegenerateVariance(NumericalError):
    pass
