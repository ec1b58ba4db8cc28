"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation-type errors exit 2,
compatibility errors exit 3 and numeric errors exit 4.
"""
from __future__ import annotations


class MoECollabError(Exception):
    """Base class for all library errors."""


class ValidationError(MoECollabError, ValueError):
    """Input failed a documented precondition."""


class ShapeError(ValidationError):
    """Tensor dimensions disagree."""


class LabelError(ValidationError):
    """A label id lies outside the declared class range."""


class NumericError(MoECollabError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class UndefinedEntropyError(ValidationError):
    """Routing entropy requested for an expert that received no gate mass."""


class BundleError(ValidationError):
    """Base class for bundle file decoding failures."""


class BadMagicError(BundleError):
    pass


class UnsupportedFormatError(BundleError):
    pass


class ChecksumError(BundleError):
    pass


class BundleShapeError(BundleError, ShapeError):
    pass


class ConflictError(ValidationError):
    """An (expert_id, version) pair is already registered."""


class CompatibilityError(MoECollabError):
    """One or more experts cannot be combined with the model.

    ``violations`` holds every human-readable violation found, not only the first.
    """

    def __init__(self, message: str, violations: list[str] | None = None):
        self.violations = list(violations or [])
        if self.violations:
            message = message + ": " + "; ".join(self.violations)
        super().__init__(message)


class AssemblyError(CompatibilityError):
    """Selected experts could not be assembled into a model."""
