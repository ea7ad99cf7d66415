"""Exception types shared across the package."""

from __future__ import annotations


class SeqcalError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(SeqcalError):
    """A log line could not be decoded into a record."""

    def __init__(self, message: str, line_number: int | None = None, offset: int | None = None):
        self.line_number = line_number
        self.offset = offset
        prefix = ""
        if line_number is not None:
            prefix += f"line {line_number}: "
        if offset is not None:
            prefix += f"offset {offset}: "
        super().__init__(prefix + message)


class ValidationError(SeqcalError):
    """A record violates an invariant; ``field`` names the offending field."""

    def __init__(self, field: str, message: str, line_number: int | None = None):
        self.field = field
        self.line_number = line_number
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(f"{prefix}{field}: {message}")


class FeatureError(SeqcalError):
    """A step lacks the inputs needed to compute attention features."""


class MetricError(SeqcalError):
    """A metric was requested on inputs it is not defined for."""


class FitError(SeqcalError):
    """Calibrator fitting failed (non-finite loss, empty data, ...)."""


class ModelError(SeqcalError):
    """A scoring model emitted an invalid distribution."""
