"""Exception types shared across the package.

Validation failures all derive from ``ValidationError`` (itself a
``ValueError``) so callers can treat bad inputs uniformly; numeric
blow-ups during iteration raise ``NumericAbortError`` instead, which
is deliberately *not* a validation error.
"""

from __future__ import annotations


class VidmuxError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(VidmuxError, ValueError):
    """An input failed a structural or range check."""


class DimensionError(ValidationError):
    """A tensor has the wrong rank or an unsupported axis length."""


class ShapeMismatchError(ValidationError):
    """Two tensors that must agree in shape do not."""


class TaskMismatchError(ValidationError):
    """A task was applied to a clip it cannot condition on."""


class EmptyPromptError(ValidationError):
    """A task that requires a text prompt received an empty one."""


class InsufficientClipsError(ValidationError):
    """A corpus does not contain enough qualifying clips."""

    def __init__(self, message: str, *, needed: int = 0, available: int = 0):
        super().__init__(message)
        self.needed = needed
        self.available = available


class NumericAbortError(VidmuxError, RuntimeError):
    """A non-finite value appeared mid-computation.

    ``step`` records the iteration index (sampler step or training step)
    at which the abort happened, when one applies.
    """

    def __init__(self, message: str, *, step: int | None = None):
        super().__init__(message)
        self.step = step
