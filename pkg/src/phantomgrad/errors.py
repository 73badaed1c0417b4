"""Exception hierarchy shared by every module in the package."""

from __future__ import annotations


class PhantomGradError(Exception):
    """Base class for all package errors."""


class ShapeError(PhantomGradError, ValueError):
    """Operand shapes do not agree."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ParameterError(PhantomGradError, ValueError):
    """A scalar hyperparameter is outside its admissible range."""


class SingularMatrixError(PhantomGradError, ArithmeticError):
    def __init__(self, pivot: float, scale: float, index: int):
        self.pivot = pivot
        self.scale = scale
        self.index = index
        super().__init__(
            f"matrix is numerically singular: |pivot[{index}]| = {pivot:.3e} "
            f"< 1e-12 * scale ({scale:.3e})"
        )


class ZeroVectorError(PhantomGradError, ValueError):
    """An operation that needs a nonzero vector got a zero one."""


class ScaleGuardError(PhantomGradError, ValueError):
    """Refusal to materialize a dense object above the diagnostics size limit."""

    def __init__(self, dim: int, limit: int):
        self.dim = dim
        self.limit = limit
        super().__init__(f"dimension {dim} exceeds dense diagnostics limit {limit}")


class DivergenceError(PhantomGradError, RuntimeError):
    """An iteration produced a non-finite value.

    ``last_finite`` holds the last iterate that was still finite and
    ``iteration`` the index at which the blow-up was detected.
    """

    def __init__(self, message: str, last_finite=None, iteration: int = -1, trace=None):
        self.last_finite = last_finite
        self.iteration = iteration
        self.trace = trace if trace is not None else []
        super().__init__(message)


class AdjointDivergenceError(DivergenceError):
    """The backward linear fixed-point solve blew up; carries the partial adjoint."""


class MissingTrajectoryError(PhantomGradError, ValueError):
    pass


class ConfigError(PhantomGradError, ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
