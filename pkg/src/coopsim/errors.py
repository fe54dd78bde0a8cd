"""Exception hierarchy shared by every coopsim module."""


class CoopSimError(Exception):
    """Base class for all library errors."""


class DimensionError(CoopSimError, ValueError):
    """Tensor or grid shapes do not line up."""


class ConfigurationError(CoopSimError, ValueError):
    """A configuration value is invalid or inconsistent with the weights."""


class UsageError(CoopSimError, ValueError):
    """The caller violated an API precondition."""


class NumericsError(CoopSimError, FloatingPointError):
    """A forward pass produced NaN or Inf."""


class TrainingError(CoopSimError, RuntimeError):
    """Optimization diverged (non-finite loss or gradient)."""
