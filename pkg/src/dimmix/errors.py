"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ScheduleError(ValueError):
    """A butterfly or patch schedule violates a divisibility rule."""


class IncomposableError(ValueError):
    """Two DeBut factors cannot be multiplied."""


class ConfigError(ValueError):
    """Invalid or unknown experiment configuration."""


class DataFormatError(ValueError):
    """Dataset or checkpoint bytes do not match the expected layout."""


class NumericError(RuntimeError):
    """Non-finite values appeared where finite ones are required."""
