"""Shared exception types."""


class SftReconError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SftReconError):
    """Invalid run configuration; the message names the offending field."""
