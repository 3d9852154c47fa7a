"""Exception hierarchy shared by every module."""


class ConfigError(ValueError):
    """Invalid configuration or parameter combination."""


class ShapeError(ValueError):
    """Grid or tensor dimensions do not match."""


class RejectedInputError(ValueError):
    """Input violates an operation precondition (e.g. ray origin inside an obstacle)."""


class DataError(RuntimeError):
    """Inconsistent on-disk data: missing sequences, hash mismatches."""


class DecodeError(DataError):
    """Binary file could not be decoded."""


class BadMagicError(DecodeError):
    pass


class BadVersionError(DecodeError):
    pass


class ChecksumError(DecodeError):
    pass


class TruncatedError(DecodeError):
    pass


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""
