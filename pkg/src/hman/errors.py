"""Exception types shared across modules (CLI maps these to exit codes)."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid or infeasible."""


class FormatError(ValueError):
    """An on-disk artifact is malformed; messages carry byte positions."""


class TrainingAbort(RuntimeError):
    """Training stopped on a fatal numerical condition (e.g. NaN gradient)."""
