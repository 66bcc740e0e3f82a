"""Shared exception types."""


class ConfigError(ValueError):
    """A shape or configuration mismatch detected at construction or call time."""


class FormatError(ValueError):
    """A malformed, truncated, corrupted, or version-incompatible file."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient)."""


class UsageError(RuntimeError):
    """An API called out of order, e.g. backward before any forward."""
