from __future__ import annotations


class MathError(ValueError):
    """Base for every calculation-tool failure.

    ``kind`` is the stable slug spliced into generated text as ``ERROR: <kind>``.
    """

    kind = "math-error"


class ExprSyntaxError(MathError):
    kind = "syntax-error"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownFunctionError(ExprSyntaxError):
    kind = "unknown-function"


class DivisionByZeroError(MathError):
    kind = "division-by-zero"


class DomainError(MathError):
    kind = "domain-error"


class UnboundVariableError(MathError):
    kind = "unbound-variable"


class NonFiniteError(MathError):
    kind = "non-finite"


class NonlinearEquationError(MathError):
    kind = "nonlinear-equation"


class SingularSystemError(MathError):
    kind = "singular-system"


class DimensionMismatchError(MathError):
    kind = "dimension-mismatch"
