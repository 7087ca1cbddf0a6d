"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not fit the operation."""


class DegenerateInputError(ValueError):
    """Input is valid in shape but degenerate (zero variance, empty cluster, ...)."""


class UnsupportedArchitecture(TypeError):
    """Operation is only defined for a subset of network types."""


class ScheduleError(ValueError):
    """Requested epochs are missing from a training trace."""


class ConfigError(ValueError):
    """Experiment configuration is invalid."""


class NumericFailure(FloatingPointError):
    """Training produced non-finite values."""


class InsufficientTrials(ConfigError):
    """Too few paired trials for a correlation study."""
