"""Exception hierarchy shared by all modules."""


class RelstabError(Exception):
    """Base class for all errors raised by this package."""


class ExprSyntaxError(RelstabError):
    """Expression text could not be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.message = message
        self.offset = offset


class EvaluationError(RelstabError):
    """Overflow or a non-finite value during evaluation."""


class SystemFileError(RelstabError):
    """System file is malformed; carries a 1-based line and column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f"line {line}" + (f", column {column}" if column else "") if line else ""
        super().__init__(f"{where}: {message}" if where else message)
        self.message = message
        self.line = line
        self.column = column


class ValidationError(RelstabError):
    """A validator rejected a system; ``check`` names the failing validator."""

    def __init__(self, check: str, message: str, residual: float | None = None,
                 line: int | None = None, detail: dict | None = None):
        prefix = f"line {line}: " if line else ""
        super().__init__(f"{prefix}{check}: {message}")
        self.check = check
        self.message = message
        self.residual = residual
        self.line = line
        self.detail = detail or {}


class NotRelativeEquilibriumError(RelstabError):
    """The point fails the relative-equilibrium residual test."""

    def __init__(self, residual: float, tol: float):
        super().__init__(f"not a relative equilibrium: residual {residual:.3e} > tol {tol:.1e}")
        self.residual = residual
        self.tol = tol


class NewtonError(RelstabError):
    """Newton iteration diverged, stalled, or hit a singular system."""

    def __init__(self, message: str, null_vector=None, iterations: int = 0):
        super().__init__(message)
        self.null_vector = null_vector
        self.iterations = iterations


class SliceError(RelstabError):
    """Slice construction or Hessian restriction violated an invariant."""


class ConsistencyError(RelstabError):
    """The two formulations of the stability test disagree."""


class IntegrationError(RelstabError):
    """Implicit-midpoint step failed after all step-halving retries."""
