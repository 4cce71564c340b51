"""Shared exception types.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericDivergenceError -> 4. Everything else is a
plain bug and escapes with a traceback.
"""


class ConfigError(Exception):
    """Invalid or inconsistent configuration (unknown keys, bad ranges)."""


class DataError(Exception):
    """Missing, malformed or mutually inconsistent input data."""


class NumericDivergenceError(Exception):
    """Training produced a non-finite loss or parameter."""


class ShapeError(ValueError):
    """Operands with incompatible shapes passed to a tensor op."""


class RankError(ValueError):
    """Backward started from a non-scalar tensor."""


class StateError(RuntimeError):
    """Optimizer asked to step without gradients in place."""


class EmptyRegionError(ValueError):
    """An operation that needs a non-empty voxel region got an empty one."""
