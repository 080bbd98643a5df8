"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class FracNullError(Exception):
    """Base class for all errors raised by :mod:`fracnull`."""


class InvalidInputError(FracNullError, ValueError):
    """An argument violates a documented precondition."""


class GridMismatchError(InvalidInputError):
    """Two objects that must share a grid (or a shape) do not."""


class GridTooCoarseError(InvalidInputError):
    """The grid has fewer steps than singular quadrature needs."""


class NonFiniteError(FracNullError, ArithmeticError):
    """A computation produced NaN or infinite values."""


class ResourceLimitError(FracNullError):
    """A requested allocation exceeds the configured cap."""


class ConvergenceError(FracNullError):
    """An iterative or refinement procedure failed to settle.

    ``trace`` holds whatever diagnostic sequence the caller collected.
    """

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace
