"""Exception types raised by the tracking engine."""


class TrackerError(Exception):
    """Base class for every error the engine raises on purpose."""


class DimensionError(TrackerError, ValueError):
    """Tensor shapes disagree along a named axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ArgumentError(TrackerError, ValueError):
    """An argument value is outside what the operation accepts."""


class ConfigError(TrackerError, ValueError):
    """A configuration value is invalid; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class FormatError(TrackerError, ValueError):
    """A file does not follow the expected on-disk layout."""


class PlanError(TrackerError, RuntimeError):
    """The sliding-window schedule was violated internally."""


class TrainingError(TrackerError, RuntimeError):
    """Training cannot continue (e.g. the loss became NaN)."""

    def __init__(self, message, batch_seed=None):
        super().__init__(message)
        self.batch_seed = batch_seed
