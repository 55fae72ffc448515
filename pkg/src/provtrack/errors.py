"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ProvtrackError(Exception):
    """Base class for all provtrack errors."""


class SchemaError(ProvtrackError):
    """Malformed input data: ragged rows, duplicate features, unknown features."""


class ExprSyntaxError(ProvtrackError):
    """Expression text could not be parsed. Carries the failing offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ExprTypeError(ProvtrackError):
    """Operands of an expression have incompatible types."""


class OperatorError(ProvtrackError):
    """An operator was applied with an invalid payload or to incompatible data."""


class ValidationError(ProvtrackError):
    """A pipeline file failed validation. CLI exit code 2."""


class IntegrityError(ProvtrackError):
    """The provenance log or graph is internally inconsistent. CLI exit code 4."""


class AmbiguousChangeWarning(UserWarning):
    """Rows and columns changed in a single observed step; coarse fallback used."""
