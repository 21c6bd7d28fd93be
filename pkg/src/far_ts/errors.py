"""Exception types shared across the package."""


class FarTsError(Exception):
    """Base class for all package errors."""


class DimensionError(FarTsError, ValueError):
    pass


class NumericError(FarTsError, ArithmeticError):
    pass


class ConfigError(FarTsError, ValueError):
    pass


class LengthError(FarTsError, ValueError):
    """Sequence longer than the model context allows."""


class VocabError(FarTsError, ValueError):
    pass


class SamplingError(FarTsError, RuntimeError):
    pass


class InputError(FarTsError, ValueError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class StateError(FarTsError, RuntimeError):
    pass


class FormatError(FarTsError, ValueError):
    """File does not carry the expected magic/structure."""


class CorruptionError(FarTsError, ValueError):
    """File is truncated or its content hash does not match."""


class ChecksumError(FarTsError, ValueError):
    """Token corpus refers to a different Stage-I checkpoint."""
