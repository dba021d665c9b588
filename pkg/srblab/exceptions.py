"""
Error types shared by the laboratory modules.

Every error carries the process exit code the command line reports for it:
2 for refused operations (bad input, violated preconditions, escaping
orbits), 3 for failed internal assertions.
"""

EXIT_PRECONDITION = 2
EXIT_INVARIANT = 3


class LabError(Exception):
    """Base class for laboratory errors."""

    exit_code = EXIT_PRECONDITION


class DomainError(LabError, ValueError):
    """Argument outside the domain of an operation."""


class PreconditionError(LabError):
    """An operation's precondition does not hold for the given input."""


class EscapeError(LabError):
    """An orbit left the declared domain of a planar map.

    Attributes:
        iterate: Index of the first iterate found outside the domain.
        partial: Estimate accumulated before the escape, if any.
    """

    def __init__(self, message, iterate=None, partial=None):
        super().__init__(message)
        self.iterate = iterate
        self.partial = partial


class UncoveredPointError(PreconditionError):
    """A point is not covered by a reparametrization tree."""

    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level


class InvariantViolation(LabError, AssertionError):
    """A property guaranteed by construction failed on an instance."""

    exit_code = EXIT_INVARIANT


class TreeBuildError(InvariantViolation):
    """The reparametrization tree failed its coverage guarantee."""
