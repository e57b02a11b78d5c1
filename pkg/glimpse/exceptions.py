"""
Exception hierarchy for the glimpse package.

Every error raised on purpose by the library derives from GlimpseError so
callers (and the CLI exit-code mapping) can catch the whole family at once.
"""

from typing import Optional


class GlimpseError(Exception):
    """Base class for all glimpse errors."""


class ContractViolation(GlimpseError, ValueError):
    """An argument broke an operation's precondition (shape, range, type)."""


class LayoutError(ContractViolation):
    """A retina spec does not tile its grid."""

    def __init__(self, message: str, residual: Optional[int] = None):
        super().__init__(message)
        self.residual = residual


class NumericalError(GlimpseError, ArithmeticError):
    """Base class for numerical failures."""


class NotPositiveDefiniteError(NumericalError):
    """Cholesky factorization met a non-positive pivot."""

    def __init__(self, pivot: int, message: Optional[str] = None):
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")
        self.pivot = pivot


class DegenerateNoiseError(NumericalError):
    """A diagonal noise vector has a non-positive or non-finite entry."""

    def __init__(self, message: str, offset_id=None):
        if offset_id is not None:
            message = f"{message} (offset {offset_id})"
        super().__init__(message)
        self.offset_id = offset_id


class DataFormatError(GlimpseError):
    """A file could not be parsed; `offset` is the byte position of the fault."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class ChecksumError(DataFormatError):
    """GLIM body checksum mismatch."""


class ConfigError(GlimpseError):
    """Run configuration failed validation."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class DesignSearchError(GlimpseError):
    """Exhaustive design search would exceed its evaluation budget."""
