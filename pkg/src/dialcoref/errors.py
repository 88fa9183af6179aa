"""Exception types shared across the package."""


class DialcorefError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(DialcorefError):
    """Malformed input data (bad JSON, bad CoNLL structure)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(DialcorefError):
    """Structurally parseable input that violates a dialogue invariant."""


class PluralLinkError(ValidationError):
    """A mention address appears in more than one cluster."""


class ShapeError(DialcorefError):
    """Incompatible matrix shapes in a graph operation."""


class CapacityError(DialcorefError):
    """More distinct speakers than the configured speaker-token capacity."""


class WindowOverflowError(DialcorefError):
    """A single utterance exceeds the encoder token budget."""


class NumericError(DialcorefError):
    """Non-finite values where finite ones are required."""
