"""Typed errors raised by the library.

The CLI maps :class:`ValidationError` to exit status 2 and
:class:`NumericalFailure` to exit status 3.
"""


class TBDefectError(Exception):
    """Base class for all library errors."""


class ValidationError(TBDefectError, ValueError):
    """Invalid input: violated precondition, malformed configuration."""


class DomainError(ValidationError):
    """Argument outside the domain of an analytic function."""


class NumericalFailure(TBDefectError):
    """A computation could not be completed to the requested accuracy."""


class CollisionError(NumericalFailure):
    """Chemical potential (or Fermi level) collides with the spectrum."""

    def __init__(self, message="chemical potential collides with spectrum", *, level=None,
                 eigenvalue=None, iterate=None):
        super().__init__(message)
        self.level = level
        self.eigenvalue = eigenvalue
        self.iterate = iterate


class ConvergenceError(NumericalFailure):
    """An iterative procedure hit its cap without converging."""

    def __init__(self, message, *, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class AdmissibilityError(NumericalFailure):
    """A displacement violates the non-interpenetration bound."""

    def __init__(self, message, *, worst=None):
        super().__init__(message)
        self.worst = worst


class SpectrumError(NumericalFailure):
    """Eigensolver failure or an eigen-decomposition failing its self-check."""
