"""Exception hierarchy shared across the pipeline.

Exit-code mapping lives in the CLI: ConfigurationError/ArgumentError -> 2,
TransportError/ProtocolError -> 3, NumericError -> 4.
"""


class ImdetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ImdetError):
    """Invalid or inconsistent configuration (bad vocab, impossible canvas, ...)."""


class ArgumentError(ImdetError):
    """Invalid argument to an operation (out-of-range class id, bad box, ...)."""


class TransportError(ImdetError):
    """A remote service could not be reached after retries."""

    def __init__(self, message, attempts=1):
        super().__init__(message)
        self.attempts = attempts


class ProtocolError(ImdetError):
    """A remote service answered, but not in the agreed wire format."""


class FormatError(ImdetError):
    """A payload (image bytes, manifest line) could not be decoded."""


class GenerationError(ImdetError):
    """Too many samples failed while generating a dataset."""


class NumericError(ImdetError):
    """NaN/Inf surfaced where finite numbers are required."""
