"""Exception and warning types shared across the engine."""
from __future__ import annotations


class ShapeError(ValueError):
    """An array argument has the wrong rank or incompatible dimensions."""


class ResampleError(ValueError):
    """A grid cannot be resampled to the requested resolution."""


class ConfigurationError(ValueError):
    """A config value (file key or dataclass field) violates its contract."""


class DivergenceError(ArithmeticError):
    """An iterative computation produced NaN/inf or stopped descending."""


class DegenerateInputWarning(UserWarning):
    """A computation hit a degenerate input (zero mass, constant map, rank
    collapse) and fell back to its documented convention."""
