"""Error taxonomy shared across the package.

Each class maps to a process exit code so the CLI can translate failures
without string matching: ConfigError -> 2, DataError -> 3, NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration or incompatible shapes/geometry."""

    exit_code = 2


class DataError(ValueError):
    """Bad input data (unreadable files, non-binary values, empty sets)."""

    exit_code = 3


class NumericError(ArithmeticError):
    """Numerical failure at runtime (NaN/Inf loss or gradients)."""

    exit_code = 4
