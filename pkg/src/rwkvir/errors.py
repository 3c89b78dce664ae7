"""Exception types shared across the library.

The CLI maps these onto exit codes: ConfigError/usage problems exit 1,
DataError/FormatError exit 2, NumericError exits 3.
"""


class ConfigError(ValueError):
    """Invalid configuration value (bad kernel size, unknown key, ...)."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class StateError(RuntimeError):
    """Object is in the wrong mode for the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite math was required."""


class DataError(ValueError):
    """Problem with user-supplied data (missing files, bad manifest rows)."""


class FormatError(ValueError):
    """Malformed file content; carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
