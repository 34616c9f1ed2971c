"""Exception hierarchy shared by every module.

Each class carries the process exit code the command-line front end uses.
"""


class ResViTError(Exception):
    exit_code = 1


class ConfigError(ResViTError, ValueError):
    """Invalid configuration, preset, task string or variant."""

    exit_code = 2


class DimensionError(ConfigError):
    """Incompatible tensor extents."""


class ContractError(ConfigError):
    """A function was called outside its documented preconditions."""


class DataError(ResViTError):
    """Missing, corrupt or inconsistent on-disk data."""

    exit_code = 3


class NumericError(ResViTError, ArithmeticError):
    """NaN/inf encountered where finite values are required."""

    exit_code = 4
