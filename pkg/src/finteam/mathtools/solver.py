"""Linear equation systems: coefficient extraction and Gaussian elimination."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import (
    DimensionMismatchError,
    DivisionByZeroError,
    ExprSyntaxError,
    NonlinearEquationError,
    SingularSystemError,
)
from .expr import BinOp, Call, Expr, Neg, Num, Var, eval_expression, format_number, free_variables, parse_expression

_PIVOT_TOL = 1e-12


@dataclass
class EquationSystem:
    equations: list[tuple[Expr, Expr]]
    variables: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.equations:
            raise ValueError("equation system needs at least one equation")
        seen: list[str] = []
        for lhs, rhs in self.equations:
            for name in free_variables(lhs) + free_variables(rhs):
                if name not in seen:
                    seen.append(name)
        if not self.variables:
            self.variables = seen
        missing = [v for v in seen if v not in self.variables]
        if missing:
            raise ValueError(f"variables not declared: {missing}")


def _split_top_level(text: str) -> list[tuple[int, str]]:
    parts: list[tuple[int, str]] = []
    depth = 0
    start = 0
    for i, ch in enumerate(text):
        if ch in "(（":
            depth += 1
        elif ch in ")）":
            depth -= 1
        elif depth == 0 and ch in ";；,，\n":
            parts.append((start, text[start:i]))
            start = i + 1
    parts.append((start, text[start:]))
    return [(s, p) for s, p in parts if p.strip()]


def parse_equation_system(text: str) -> EquationSystem:
    """Parse ``"x+y=3; x-y=1"``. Separators: ``;``, newline, or a top-level comma."""
    body = text.strip()
    if body.startswith("{") and body.endswith("}"):
        body = body[1:-1]
    equations = []
    for start, part in _split_top_level(body.replace("＝", "=")):
        if part.count("=") != 1:
            raise ExprSyntaxError("each equation needs exactly one '='", len(body[:start].encode("utf-8")))
        lhs, rhs = part.split("=")
        equations.append((parse_expression(lhs), parse_expression(rhs)))
    if not equations:
        raise ExprSyntaxError("no equations", 0)
    return EquationSystem(equations)


# A linear form is (coefficients by variable, constant term).
_Linear = tuple[dict[str, float], float]


def _scale(form: _Linear, k: float) -> _Linear:
    coeffs, const = form
    return {v: c * k for v, c in coeffs.items()}, const * k


def _add(a: _Linear, b: _Linear, sign: float = 1.0) -> _Linear:
    coeffs = dict(a[0])
    for v, c in b[0].items():
        coeffs[v] = coeffs.get(v, 0.0) + sign * c
    return coeffs, a[1] + sign * b[1]


def _is_const(form: _Linear) -> bool:
    return all(c == 0.0 for c in form[0].values())


def linear_form(expr: Expr) -> _Linear:
    """Extract coefficients of ``expr``; raise if it is not affine in its variables."""
    if isinstance(expr, Num):
        return {}, float(expr.value)
    if isinstance(expr, Var):
        return {expr.name: 1.0}, 0.0
    if isinstance(expr, Neg):
        return _scale(linear_form(expr.operand), -1.0)
    if isinstance(expr, Call):
        forms = [linear_form(a) for a in expr.args]
        if not all(_is_const(f) for f in forms):
            raise NonlinearEquationError(f"variable inside {expr.name}()")
        return {}, eval_expression(Call(expr.name, tuple(Num(f[1]) for f in forms)))
    if isinstance(expr, BinOp):
        a = linear_form(expr.left)
        b = linear_form(expr.right)
        if expr.op == "+":
            return _add(a, b)
        if expr.op == "-":
            return _add(a, b, -1.0)
        if expr.op == "*":
            if _is_const(a):
                return _scale(b, a[1])
            if _is_const(b):
                return _scale(a, b[1])
            raise NonlinearEquationError("product of variables")
        if expr.op == "/":
            if not _is_const(b):
                raise NonlinearEquationError("variable in denominator")
            if b[1] == 0.0:
                raise DivisionByZeroError("division by zero")
            return _scale(a, 1.0 / b[1])
        if expr.op == "^":
            if not _is_const(b):
                raise NonlinearEquationError("variable in exponent")
            if _is_const(a):
                return {}, eval_expression(BinOp("^", Num(a[1]), Num(b[1])))
            if b[1] == 1.0:
                return a
            if b[1] == 0.0:
                return {}, 1.0
            raise NonlinearEquationError("variable raised to a power")
    raise TypeError(f"not an expression node: {expr!r}")


def gaussian_solve(matrix: list[list[float]], rhs: list[float]) -> list[float]:
    """Solve ``matrix @ x = rhs`` by elimination with partial pivoting.

    Works on rectangular systems: an over-determined but consistent system of
    full column rank still has its unique solution returned.
    """
    n = len(matrix)
    m = len(matrix[0]) if n else 0
    if len(rhs) != n:
        raise DimensionMismatchError("rhs length differs from row count")
    a = [list(map(float, row)) + [float(r)] for row, r in zip(matrix, rhs)]
    scale = max((abs(x) for row in a for x in row[:m]), default=0.0) or 1.0
    tol = _PIVOT_TOL * scale * max(n, m, 1)

    rank = 0
    pivot_cols: list[int] = []
    for col in range(m):
        if rank == n:
            break
        p = max(range(rank, n), key=lambda r: abs(a[r][col]))
        if abs(a[p][col]) <= tol:
            continue
        a[rank], a[p] = a[p], a[rank]
        piv = a[rank][col]
        for r in range(rank + 1, n):
            f = a[r][col] / piv
            if f != 0.0:
                row_r, row_p = a[r], a[rank]
                for c in range(col, m + 1):
                    row_r[c] -= f * row_p[c]
        pivot_cols.append(col)
        rank += 1

    rhs_scale = max((abs(row[m]) for row in a), default=0.0) or 1.0
    inconsistent = any(abs(a[r][m]) > _PIVOT_TOL * max(scale, rhs_scale) * max(n, m, 1) for r in range(rank, n))
    if inconsistent or rank < m:
        if n != m:
            raise DimensionMismatchError(f"{n} equations in {m} unknowns have no unique solution")
        raise SingularSystemError("system has no unique solution")

    x = [0.0] * m
    for r in range(m - 1, -1, -1):
        s = a[r][m] - sum(a[r][c] * x[c] for c in range(r + 1, m))
        x[r] = s / a[r][r]
    return x


def solve_equation_system(system: EquationSystem | str) -> dict[str, float]:
    if isinstance(system, str):
        system = parse_equation_system(system)
    variables = system.variables
    if not variables:
        raise DimensionMismatchError("no unknowns to solve for")
    matrix: list[list[float]] = []
    rhs: list[float] = []
    for lhs, right in system.equations:
        coeffs, const = _add(linear_form(lhs), linear_form(right), -1.0)
        matrix.append([coeffs.get(v, 0.0) for v in variables])
        rhs.append(-const)
    values = gaussian_solve(matrix, rhs)
    return {v: (x if x != 0.0 else 0.0) for v, x in zip(variables, values)}


_ASSIGN_RE = re.compile(r"\s*([^\s=,]+)\s*=\s*([^,]+)")


def format_assignment(solution: dict[str, float]) -> str:
    return ", ".join(f"{name}={format_number(value)}" for name, value in solution.items())


def parse_assignment(text: str) -> dict[str, float]:
    """Inverse of :func:`format_assignment` (used when validating generated text)."""
    out: dict[str, float] = {}
    for piece in text.split(","):
        m = _ASSIGN_RE.fullmatch(piece)
        if not m:
            raise ValueError(f"not an assignment: {piece!r}")
        out[m.group(1)] = float(m.group(2))
    return out
