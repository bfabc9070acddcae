"""Exception hierarchy shared by all modules."""


class HubertLabError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(HubertLabError, ValueError):
    """Invalid or inconsistent configuration."""


class IngestionError(HubertLabError):
    """A file could not be read; the message names the offending field."""


class EmptyFeatureError(HubertLabError, ValueError):
    """Waveform too short to produce a single feature frame."""


class ShapeError(HubertLabError, ValueError):
    """Array dimensions do not match what the operation expects."""


class DivergenceError(HubertLabError):
    """Training diverged. ``report`` describes where; partial state is attached."""

    def __init__(self, message, report=None, params=None, log=None):
        super().__init__(message)
        self.report = report or {}
        self.params = params
        self.log = log
