"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: validation/format problems exit 1,
numerical failures exit 2.
"""


class SpeechvecError(Exception):
    """Base class for all toolkit errors."""


class ParseError(SpeechvecError):
    """A text input could not be parsed; carries the offending line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ValidationError(SpeechvecError):
    """Input violates a documented precondition or invariant."""


class InsufficientDataError(ValidationError):
    """Too little data to compute the requested statistic."""


class FormatError(SpeechvecError):
    """A binary or structured file does not match its declared format."""


class NumericalError(SpeechvecError):
    """A computation produced non-finite values."""
