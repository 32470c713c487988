from __future__ import annotations

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class TokenBreakError(Exception):
    exit_code = EXIT_DATA


class UsageError(TokenBreakError):
    exit_code = EXIT_USAGE


class DataError(TokenBreakError):
    exit_code = EXIT_DATA


class ImageFormatError(DataError):
    pass


class OutputError(DataError):
    """An output file or directory could not be written."""


class GridError(DataError):
    pass


class SpectralError(DataError):
    pass


class DisruptionError(DataError):
    pass


class WeightFormatError(DataError):
    pass


class NumericalError(DataError):
    pass


class SimilarityError(DataError):
    pass


class FeatureFormatError(DataError):
    pass


class EpisodeError(DataError):
    pass


class EpisodeShapeError(UsageError):
    pass
