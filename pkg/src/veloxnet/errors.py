"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class corresponds to one
failure category rather than one call site.
"""


class VeloxError(Exception):
    """Base class for all library errors."""


class DimensionError(VeloxError, ValueError):
    """Shapes, extents or channel counts are inconsistent."""


class StateError(VeloxError, RuntimeError):
    """An object was used before it reached the required state."""


class DataError(VeloxError, ValueError):
    """Malformed file, manifest or label data."""


class ConfigError(VeloxError, ValueError):
    """Invalid model, ablation or gMLP configuration."""


class NumericError(VeloxError, ArithmeticError):
    """NaN or Inf encountered, or a gradient check failed."""


class UsageError(VeloxError, ValueError):
    """Bad arguments to a user-facing entry point."""


class ConsistencyError(VeloxError, AssertionError):
    """Closed-form accounting disagrees with allocated parameters."""
