"""Exception hierarchy shared across the package.

The CLI maps each family to a process exit code.
"""


class FloodBenchError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ShapeError(FloodBenchError, ValueError):
    """Operands have incompatible shapes."""

    exit_code = 2


class ContractError(FloodBenchError, ValueError):
    """A documented precondition was violated by the caller."""

    exit_code = 2


class ConfigError(FloodBenchError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(FloodBenchError, ValueError):
    """Malformed input data (rasters, label values, checkpoints)."""

    exit_code = 3


class NumericError(FloodBenchError, FloatingPointError):
    """A non-finite value appeared in a forward computation."""

    exit_code = 4
