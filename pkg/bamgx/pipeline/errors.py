"""
Exceptions for the bamgx Pipeline

Argument-shaped problems derive from ValueError so callers that only know the
standard library can still catch them; numerical breakdowns derive from
ArithmeticError through NumericalError. The CLI maps the two families to
different exit codes.
"""


class BamgError(Exception):
    """Base class for every error raised by bamgx."""


class DimensionMismatchError(BamgError, ValueError):
    """Operand shapes do not agree."""


class SpecificationError(BamgError, ValueError):
    """A problem or region description is inconsistent."""


class ResolutionError(BamgError, ValueError):
    """The fine grid does not resolve the requested coefficient layout."""


class ConfigError(BamgError, ValueError):
    """An experiment configuration failed validation."""


class MatrixMarketParseError(BamgError, ValueError):
    """A Matrix Market file is malformed."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NumericalError(BamgError, ArithmeticError):
    """Base class for numerical breakdowns."""


class IndefiniteMatrixError(NumericalError):
    """An energy inner product came out negative."""


class DegenerateRowError(NumericalError):
    """A matrix row is identically zero."""

    def __init__(self, row: int):
        super().__init__(f"row {row} is identically zero")
        self.row = row


class DegenerateDiagonalError(NumericalError):
    """A diagonal entry needed by a pointwise smoother is zero."""

    def __init__(self, row: int):
        super().__init__(f"zero diagonal entry in row {row}")
        self.row = row


class DegenerateVectorError(NumericalError):
    """A quotient denominator vanished."""


class SingularProjectionError(NumericalError):
    """X X^T is rank deficient."""


class UndefinedDistanceError(NumericalError):
    """Algebraic distance requested for a point whose test-vector trace is zero."""


class IsolatedPointError(NumericalError):
    """An F-point has no admissible interpolatory neighbor."""

    def __init__(self, point: int):
        super().__init__(f"F-point {point} has no coarse interpolation candidates")
        self.point = point


class StagnationError(NumericalError):
    """A level failed to coarsen."""


class SingularCoarseError(NumericalError):
    """The coarsest-level factorization failed."""


class GramDegenerateError(NumericalError):
    """The Gram operator T_l is (numerically) singular."""
