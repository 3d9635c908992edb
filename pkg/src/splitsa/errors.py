"""Exception types shared across the toolkit.

All of them derive from ``ValueError`` so callers that only care about bad
input can catch the builtin.
"""


class SplitSAError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(SplitSAError, ValueError):
    """An operation was called with arguments outside its preconditions."""


class ConfigurationError(SplitSAError, ValueError):
    """A configuration (weights, partition, stage graph, layout) is inconsistent."""


class ParseError(SplitSAError, ValueError):
    """A serialized input could not be decoded.

    ``location`` is a 1-based line number for text inputs and a byte offset
    for binary inputs.
    """

    def __init__(self, message, location=None, kind="line"):
        self.location = location
        self.kind = kind
        if location is not None:
            message = f"{kind} {location}: {message}"
        super().__init__(message)


class MeasurementError(SplitSAError, ValueError):
    """Latency measurements violate the assumptions of an estimator."""
