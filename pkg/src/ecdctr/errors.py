"""Exception hierarchy shared across the package."""

from __future__ import annotations


class EcdctrError(Exception):
    """Base class for all package errors."""


class ConfigError(EcdctrError):
    """Invalid configuration: bad shapes, unknown keys, inconsistent values."""


class DataError(EcdctrError):
    """Malformed input data (bad labels, unparsable sample lines)."""


class NumericError(EcdctrError):
    """Non-finite value produced during computation."""


class StaleCacheError(EcdctrError):
    """A backward cache was reused after the parameters were mutated."""


class FormatError(EcdctrError):
    """Binary file does not match the expected on-disk format."""


class OrderingError(EcdctrError):
    """Snapshot inserted out of month order."""


class InsufficientHistoryError(EcdctrError):
    """History lookup attempted before the store finished warming up."""


class TransferError(EcdctrError):
    """Parameter transfer between structurally incompatible models."""


class OverlapError(EcdctrError):
    """Snapshot months overlap the training-data month of a weekly update."""


class MetricUndefinedError(EcdctrError):
    """Requested ranking metric is undefined for the given groups."""
