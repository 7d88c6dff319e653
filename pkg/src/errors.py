"""Exception types raised by the VPP architecture simulator."""

from typing import Optional, Sequence


class VppError(Exception):
    """Base class for all simulator errors."""

    def with_context(self, context: str) -> "VppError":
        """Prefix the message with where the error happened; returns self."""
        if self.args:
            self.args = (f"{context}: {self.args[0]}",) + tuple(self.args[1:])
        else:
            self.args = (context,)
        return self


class DimensionError(VppError, ValueError):
    """Vectors or matrices with incompatible shapes."""


class ConstraintError(VppError, ValueError):
    """An input violates a stated constraint (simplex weights, beta, budget)."""


class ConfigurationError(VppError, ValueError):
    """Invalid scenario or run configuration."""


class EnsembleParseError(VppError, ValueError):
    """Ensemble CSV does not conform to the schema."""

    def __init__(
        self, message: str, row: Optional[int] = None, column: Optional[str] = None
    ):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.row = row
        self.column = column


class NonConvexProblemError(VppError, ValueError):
    """Quadratic term with a negative diagonal entry."""


class InfeasibleProblemError(VppError, RuntimeError):
    """The constraint system of a dispatch problem admits no solution."""

    def __init__(self, message: str, violated: Sequence[str] = ()):
        if violated:
            message = f"{message}: violated {', '.join(violated)}"
        super().__init__(message)
        self.violated = list(violated)


class SolverError(VppError, RuntimeError):
    """The solver failed to converge or to certify its result."""
