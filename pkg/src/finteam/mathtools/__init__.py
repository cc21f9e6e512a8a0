"""The accountant's four calculation tools and their shared arithmetic core."""

from .errors import (
    DimensionMismatchError,
    DivisionByZeroError,
    DomainError,
    ExprSyntaxError,
    MathError,
    NonFiniteError,
    NonlinearEquationError,
    SingularSystemError,
    UnboundVariableError,
    UnknownFunctionError,
)
from .expr import (
    FUNCTIONS,
    BinOp,
    Call,
    Expr,
    Neg,
    Num,
    Var,
    eval_expression,
    format_number,
    free_variables,
    parse_expression,
    to_text,
)
from .solver import (
    EquationSystem,
    format_assignment,
    gaussian_solve,
    linear_form,
    parse_assignment,
    parse_equation_system,
    solve_equation_system,
)
from .stats import count_samples, normal_cdf, parse_samples

__all__ = [
    "BinOp", "Call", "DimensionMismatchError", "DivisionByZeroError", "DomainError",
    "EquationSystem", "Expr", "ExprSyntaxError", "FUNCTIONS", "MathError", "Neg",
    "NonFiniteError", "NonlinearEquationError", "Num", "SingularSystemError",
    "UnboundVariableError", "UnknownFunctionError", "Var", "count_samples",
    "eval_expression", "format_assignment", "format_number", "free_variables",
    "gaussian_solve", "linear_form", "normal_cdf", "parse_assignment",
    "parse_equation_system", "parse_expression", "parse_samples",
    "solve_equation_system", "to_text",
]
