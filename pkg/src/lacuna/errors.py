"""Exception hierarchy.

Three families map onto CLI exit codes: configuration problems (2), bad
input data (3) and numerical failures (4).
"""


class LacunaError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(LacunaError):
    exit_code = 2


class DataError(LacunaError):
    exit_code = 3


class NumericalError(LacunaError):
    exit_code = 4


# volio
class BadHeader(DataError):
    pass


class BadMagic(DataError):
    pass


class UnsupportedDatatype(DataError):
    pass


class UnsupportedDimensions(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class NonPositivePixdim(DataError):
    pass


class InvalidVolume(DataError):
    pass


class ObliqueAffine(DataError):
    pass


class GridMismatch(DataError):
    pass


# preproc
class EmptyMask(DataError):
    pass


class NonPositiveIntensity(DataError):
    pass


class DegenerateIntensities(DataError):
    pass


class ZeroMedian(DataError):
    pass


class IllConditionedFit(NumericalError):
    pass


# phantom
class PlacementFailure(DataError):
    pass


# tensor
class ShapeMismatch(DataError):
    pass


class OddSpatialDim(ShapeMismatch):
    pass


# pipeline
class PatchTooLarge(DataError):
    pass


class DivergedLoss(NumericalError):
    pass


# eval
class EmptyClassRow(DataError):
    pass


class KTooLarge(ConfigError):
    pass


class LengthMismatch(DataError):
    pass


class ZeroVariance(NumericalError):
    pass


class GradcheckFailure(NumericalError):
    pass
