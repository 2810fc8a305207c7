"""Shared exception types."""


class FramingError(ValueError):
    """A wire frame is truncated or structurally malformed."""


class ProtocolError(ValueError):
    """A frame decoded but its content violates the message contract."""


class CapacityError(RuntimeError):
    """The head's novel-class capacity is exhausted."""


class SyncError(RuntimeError):
    """A parameter delta could not be applied to the local head."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given input (e.g. no positives)."""
