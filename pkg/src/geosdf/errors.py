"""Exception types shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message text.
"""


class GeosdfError(Exception):
    """Base class for all package errors."""


class UsageError(GeosdfError):
    """Caller violated an API contract (bad arguments, detached graph, ...)."""


class DataError(GeosdfError):
    """On-disk data is missing, malformed, or inconsistent."""


class NumericFault(GeosdfError):
    """A computation produced non-finite values.

    ``segment`` names the parameter segment that went non-finite, when that
    can be determined.
    """

    def __init__(self, message, segment=None):
        super().__init__(message)
        self.segment = segment


class GenerationError(GeosdfError):
    """Reference data generation failed its own quality bar."""
