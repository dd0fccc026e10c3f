"""Exception types shared across the package."""


class SkqeError(Exception):
    """Base class for all package errors."""


class DataError(SkqeError):
    """Malformed or inconsistent input data (files, graphs, datasets)."""


class QueryParseError(SkqeError):
    """Query text rejected by the grammar; carries a character position."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class UnsupportedQueryError(SkqeError):
    """Query is grammatical but outside the 14 supported structures."""


class NumericError(SkqeError):
    """Non-finite values encountered during training or evaluation."""
