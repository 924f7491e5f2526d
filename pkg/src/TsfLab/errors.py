"""Exceptions raised by the TsfLab modules."""

from typing import Optional


class TsfLabError(Exception):
    """Base class for all TsfLab errors."""


class IngestError(TsfLabError, ValueError):
    """A CSV file could not be turned into a valid dataset."""

    def __init__(
        self, message: str, row: Optional[int] = None, column: Optional[int] = None
    ) -> None:
        super().__init__(message)
        self.row = row
        self.column = column


class WindowError(TsfLabError, ValueError):
    """A series is too short for the requested windows or an index is out of range."""


class AttackError(TsfLabError, ValueError):
    """An attack configuration cannot be applied to the given data."""


class EmptyMaskError(TsfLabError, ValueError):
    """Every channel-window of a batch is masked out."""


class DivergenceError(TsfLabError, ArithmeticError):
    """Training produced a non-finite loss."""


class AssumptionViolation(TsfLabError, ValueError):
    """A kernel instance does not satisfy the preconditions of the success bound."""


class ConfigError(TsfLabError, ValueError):
    """An experiment configuration is invalid."""

    def __init__(self, message: str, field: str = "") -> None:
        super().__init__(f"{field}: {message}" if field else message)
        self.message = message
        self.field = field


class PipelineError(TsfLabError):
    """A pipeline step failed; the message is prefixed with the failing module."""

    def __init__(self, module: str, exception: Exception) -> None:
        super().__init__(f"{module}: {exception}")
        self.module = module
