"""Exception hierarchy shared by every module."""


class SBGNNError(Exception):
    """Base class; the CLI maps any subclass to an ``error:`` line and exit 1."""


class FormatError(SBGNNError):
    """Malformed file contents (ragged rows, bad manifest structure)."""


class ParseError(FormatError):
    """A cell could not be parsed as a number."""

    def __init__(self, message: str, row: int, col: int):
        super().__init__(message)
        self.row = row
        self.col = col


class ValidationError(SBGNNError, ValueError):
    """Input violates a documented invariant."""


class ConfigError(ValidationError):
    """Out-of-range configuration value."""


class NumericalError(SBGNNError, ArithmeticError):
    """Iterative routine failed to converge or produced non-finite values."""
