"""Exception types shared across the package."""


class FusionError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FusionError):
    """Invalid configuration value or combination."""


class ValidationError(FusionError):
    """Input data violates a documented invariant."""


class FormatError(FusionError):
    """A file does not match the expected on-disk format."""


class CorruptionError(FormatError):
    """A file matches the format header but its payload is damaged."""


class EmptySetError(FormatError):
    """A stored embedding set declares zero rows or zero columns."""


class TaskError(FusionError):
    """A task cannot be constructed from the given cluster or class."""


class StateError(FusionError):
    """An operation was called on an object in an unusable state."""


class MetricError(FusionError):
    """A metric was requested on degenerate input (e.g. an empty batch)."""
