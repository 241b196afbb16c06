"""Exception types raised across the package."""


class SgpbaeError(Exception):
    """Base class for all package errors."""


class NumericError(SgpbaeError):
    """Failures of the numerical core (factorizations, gradients)."""


class NotPositiveDefinite(NumericError):
    pass


class SingularMatrix(NumericError):
    pass


class ShapeMismatch(NumericError, ValueError):
    pass


class NonScalarRoot(NumericError, ValueError):
    pass


class DimensionMismatch(SgpbaeError, ValueError):
    pass


class TooLarge(SgpbaeError, ValueError):
    pass


class NonFiniteGradient(NumericError):
    """Raised when a sampler sees NaN/Inf in a gradient.

    ``last_good`` optionally carries whatever the caller managed to
    collect before the failure (e.g. a partial training result).
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class EmptyPosterior(SgpbaeError, ValueError):
    pass


class NoMissing(SgpbaeError):
    pass


class EmptySelection(SgpbaeError, ValueError):
    pass


class ZeroTruthVariance(SgpbaeError, ValueError):
    pass


class DegenerateChains(SgpbaeError, ValueError):
    pass


class DataError(SgpbaeError):
    pass


class ParseError(DataError, ValueError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.column = column


class NoAuxColumns(DataError, ValueError):
    pass


class ConfigError(SgpbaeError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class MissingCheckpoint(SgpbaeError, FileNotFoundError):
    pass


class ChainCountTooSmall(SgpbaeError, ValueError):
    pass


class CheckpointFormatError(DataError, ValueError):
    pass
