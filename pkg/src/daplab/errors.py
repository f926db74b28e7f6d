"""Exception types shared across the lab, mapped to CLI exit codes."""


class DapLabError(Exception):
    """Base class for lab errors."""


class DimensionError(DapLabError):
    """Tensor or map shapes are incompatible with the requested operation."""


class InputError(DapLabError):
    """Bad user-supplied input: files, configs, class names. Exit code 3."""


class NumericError(DapLabError):
    """Non-finite values where finite ones are required. Exit code 4."""
