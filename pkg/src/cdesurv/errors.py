"""Exception hierarchy shared across the package."""

from __future__ import annotations

class CdeSurvError(Exception):
    pass


class ConfigError(CdeSurvError, ValueError):
    """Invalid or infeasible configuration."""


class DataError(CdeSurvError, ValueError):
    """Input data violates its schema or invariants."""


class SchemaError(DataError):
    pass


class ValidationError(DataError):
    pass


class RangeError(CdeSurvError, ValueError):
    """A query point lies outside the domain of a function."""


class UsageError(CdeSurvError, ValueError):
    """A function was called with arguments it cannot handle."""


class UndefinedMetricError(CdeSurvError, ValueError):
    """A metric has no defined value for the given data."""


class ShapeError(CdeSurvError, ValueError):
    """Operand shapes do not conform for the requested operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        listed = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class NumericError(CdeSurvError, ArithmeticError):
    """A forward result contained NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"{op}: non-finite value in result"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericDivergence(CdeSurvError, ArithmeticError):
    """Integration or training produced non-finite values."""

    def __init__(self, message: str, time: float | None = None):
        super().__init__(message)
        self.time = time


__all__ = [
    "CdeSurvError",
    "ConfigError",
    "DataError",
    "SchemaError",
    "ValidationError",
    "RangeError",
    "UsageError",
    "UndefinedMetricError",
    "NumericDivergence",
    "NumericError",
    "ShapeError",
]
