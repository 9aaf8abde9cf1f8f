"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class GaitFieldError(Exception):
    exit_code = 1


class ConfigError(GaitFieldError, ValueError):
    """Bad shapes, out-of-range hyperparameters, unknown config keys."""

    exit_code = 4


class FormatError(GaitFieldError, ValueError):
    """Malformed container or image file."""

    exit_code = 3


class NumericError(GaitFieldError, ArithmeticError):
    """Non-finite values or a failed gradient check."""

    exit_code = 5
