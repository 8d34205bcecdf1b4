"""Error taxonomy shared across the package and mapped to CLI exit codes."""


class DualRefError(Exception):
    """Base class for package errors."""

    exit_code = 1


class UsageError(DualRefError):
    """Bad command-line usage."""

    exit_code = 2


class ConfigError(DualRefError):
    """Inconsistent or invalid configuration."""

    exit_code = 3


class DataError(DualRefError):
    """I/O or on-disk layout problems."""

    exit_code = 4


class FormatError(DataError):
    """Decoded data violates an invariant (mixed sizes, bad channel count)."""

    exit_code = 4


class EmptyClipError(DataError):
    """A clip directory matched zero frames."""

    exit_code = 4


class NumericError(DualRefError):
    """Numerical failure (NaN loss, diverged optimization)."""

    exit_code = 5
