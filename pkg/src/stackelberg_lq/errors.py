"""Exception hierarchy shared by all solver stages."""

from __future__ import annotations


class StackelbergError(Exception):
    """Base class for every error raised by the package."""


class GeneratorError(StackelbergError, ValueError):
    """A transition-rate matrix violates the generator conditions."""


class ProblemFormatError(StackelbergError, ValueError):
    """A problem file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionError(ProblemFormatError):
    """Matrix shapes in a problem are mutually inconsistent."""

    def __init__(self, key: str, expected: tuple, got: tuple, line: int | None = None):
        self.key = key
        self.expected = expected
        self.got = got
        super().__init__(f"{key}: expected shape {expected}, got {got}", line)


class SolverError(StackelbergError, RuntimeError):
    """Numerical failure located at a time and regime."""

    def __init__(self, message: str, time: float | None = None, regime: int | None = None):
        self.time = time
        self.regime = regime
        where = []
        if time is not None:
            where.append(f"s={time:.6g}")
        if regime is not None:
            where.append(f"regime {regime}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class RegularityError(SolverError):
    """A weight that must be uniformly positive definite is not."""


class DecouplingError(SolverError):
    """``I + Sigma T11~`` is singular beyond the condition ceiling."""


class BlowUpError(SolverError):
    """Solution left the admissible magnitude range or became non-finite."""

    def __init__(self, message: str, time: float | None = None, regime: int | None = None,
                 last_valid: float | None = None):
        self.last_valid = last_valid
        if last_valid is not None:
            message = f"{message}; last valid node s={last_valid:.6g}"
        super().__init__(message, time, regime)


class UnsupportedError(StackelbergError, ValueError):
    """Operation not defined for the given problem (dimension, kind)."""
