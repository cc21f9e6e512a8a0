"""Arithmetic expressions: tokenizer, recursive-descent parser, printer, evaluator.

Precedence, tightest first: ``^`` (right-associative), unary minus, ``* /``,
``+ -``. So ``-2^2 == -4`` and ``2^3^2 == 512``. ``5%`` is read as ``0.05``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Context, Decimal
from typing import Mapping, Union

from .errors import (
    DivisionByZeroError,
    DomainError,
    ExprSyntaxError,
    NonFiniteError,
    UnboundVariableError,
    UnknownFunctionError,
)


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Expr", ...]


Expr = Union[Num, Var, Neg, BinOp, Call]

# name -> (min arity, max arity or None for variadic)
FUNCTIONS: dict[str, tuple[int, int | None]] = {
    "sqrt": (1, 1),
    "abs": (1, 1),
    "ln": (1, 1),
    "log10": (1, 1),
    "exp": (1, 1),
    "min": (1, None),
    "max": (1, None),
    "pow": (2, 2),
}

# Single-codepoint substitutions keep character offsets stable.
_CHAR_MAP = str.maketrans({
    "×": "*", "·": "*", "÷": "/", "−": "-", "–": "-",
    "（": "(", "）": ")", "，": ",", "％": "%", "＋": "+", "＊": "*", "／": "/",
})

_NUMBER_RE = re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_IDENT_RE = re.compile(r"[^\W\d]\w*")


@dataclass(frozen=True)
class _Token:
    kind: str  # num, ident, op, end
    text: str
    pos: int  # character offset
    value: float = 0.0


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


def _tokenize(text: str) -> list[_Token]:
    src = text.translate(_CHAR_MAP)
    tokens: list[_Token] = []
    i = 0
    n = len(src)
    while i < n:
        ch = src[i]
        if ch.isspace():
            i += 1
            continue
        m = _NUMBER_RE.match(src, i)
        if m:
            lit = m.group(0)
            value = float(lit)
            end = m.end()
            if end < n and src[end] == "%":
                value /= 100.0
                end += 1
            tokens.append(_Token("num", src[i:end], i, value))
            i = end
            continue
        m = _IDENT_RE.match(src, i)
        if m:
            tokens.append(_Token("ident", m.group(0), i))
            i = m.end()
            continue
        if src.startswith("**", i):
            tokens.append(_Token("op", "^", i))
            i += 2
            continue
        if ch in "+-*/^(),":
            tokens.append(_Token("op", ch, i))
            i += 1
            continue
        raise ExprSyntaxError(f"unexpected character {ch!r}", _byte_offset(text, i))
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def take(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str, tok: _Token, cls=ExprSyntaxError) -> ExprSyntaxError:
        return cls(message, _byte_offset(self.text, tok.pos))

    def expect(self, text: str) -> _Token:
        tok = self.peek()
        if tok.kind != "op" or tok.text != text:
            found = "end of input" if tok.kind == "end" else repr(tok.text)
            raise self.error(f"expected {text!r}, found {found}", tok)
        return self.take()

    def parse(self) -> Expr:
        if self.peek().kind == "end":
            raise self.error("empty expression", self.peek())
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            if tok.text == ")":
                raise self.error("unbalanced ')'", tok)
            raise self.error(f"unexpected {tok.text!r}", tok)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.take().text
            node = BinOp(op, node, self.term())
        return node

    def _implicit_product(self) -> bool:
        # A coefficient written against a name or parenthesis: "2x", "3(x+1)".
        prev, nxt = self.tokens[self.i - 1], self.peek()
        return (prev.kind == "num" and prev.pos + len(prev.text) == nxt.pos
                and (nxt.kind == "ident" or (nxt.kind == "op" and nxt.text == "(")))

    def term(self) -> Expr:
        node = self.unary()
        while True:
            if self.peek().kind == "op" and self.peek().text in "*/":
                op = self.take().text
            elif self._implicit_product():
                op = "*"
            else:
                return node
            node = BinOp(op, node, self.unary())

    def unary(self) -> Expr:
        tok = self.peek()
        if tok.kind == "op" and tok.text == "-":
            self.take()
            return Neg(self.unary())
        if tok.kind == "op" and tok.text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek().kind == "op" and self.peek().text == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        tok = self.take()
        if tok.kind == "num":
            return Num(tok.value)
        if tok.kind == "ident":
            nxt = self.peek()
            if nxt.kind == "op" and nxt.text == "(":
                return self.call(tok)
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "end":
            raise self.error("unexpected end of input", tok)
        raise self.error(f"unexpected {tok.text!r}", tok)

    def call(self, name_tok: _Token) -> Expr:
        name = name_tok.text
        if name not in FUNCTIONS:
            raise self.error(f"unknown function {name!r}", name_tok, UnknownFunctionError)
        self.expect("(")
        args = [self.expr()]
        while self.peek().kind == "op" and self.peek().text == ",":
            self.take()
            args.append(self.expr())
        self.expect(")")
        lo, hi = FUNCTIONS[name]
        if len(args) < lo or (hi is not None and len(args) > hi):
            raise self.error(f"{name} takes {lo}{'' if hi == lo else '+'} argument(s), got {len(args)}", name_tok)
        return Call(name, tuple(args))


def parse_expression(text: str) -> Expr:
    """Parse ``text`` into an AST. Syntax errors carry a UTF-8 byte offset."""
    return _Parser(text).parse()


def to_text(expr: Expr) -> str:
    """Print ``expr`` fully parenthesized; reparsing yields an identical tree."""
    if isinstance(expr, Num):
        return repr(float(expr.value))
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Neg):
        return f"(-{to_text(expr.operand)})"
    if isinstance(expr, BinOp):
        return f"({to_text(expr.left)} {expr.op} {to_text(expr.right)})"
    if isinstance(expr, Call):
        return f"{expr.name}({', '.join(to_text(a) for a in expr.args)})"
    raise TypeError(f"not an expression node: {expr!r}")


def free_variables(expr: Expr) -> list[str]:
    """Variable names in order of first appearance."""
    seen: dict[str, None] = {}

    def walk(node: Expr) -> None:
        if isinstance(node, Var):
            seen.setdefault(node.name)
        elif isinstance(node, Neg):
            walk(node.operand)
        elif isinstance(node, BinOp):
            walk(node.left)
            walk(node.right)
        elif isinstance(node, Call):
            for a in node.args:
                walk(a)

    walk(expr)
    return list(seen)


def _power(base: float, exponent: float) -> float:
    if base == 0.0 and exponent < 0:
        raise DivisionByZeroError("zero raised to a negative power")
    if base < 0 and not float(exponent).is_integer():
        raise DomainError("negative base with fractional exponent")
    try:
        return math.pow(base, exponent)
    except OverflowError:
        raise NonFiniteError("power overflow") from None


def _apply(name: str, args: list[float]) -> float:
    if name == "sqrt":
        if args[0] < 0:
            raise DomainError("sqrt of negative number")
        return math.sqrt(args[0])
    if name == "abs":
        return abs(args[0])
    if name in ("ln", "log10"):
        if args[0] <= 0:
            raise DomainError(f"{name} of non-positive number")
        return math.log(args[0]) if name == "ln" else math.log10(args[0])
    if name == "exp":
        try:
            return math.exp(args[0])
        except OverflowError:
            raise NonFiniteError("exp overflow") from None
    if name == "min":
        return min(args)
    if name == "max":
        return max(args)
    if name == "pow":
        return _power(args[0], args[1])
    raise UnknownFunctionError(f"unknown function {name!r}", 0)


def _eval(node: Expr, env: Mapping[str, float]) -> float:
    if isinstance(node, Num):
        value = float(node.value)
    elif isinstance(node, Var):
        if node.name not in env:
            raise UnboundVariableError(f"unbound variable {node.name!r}")
        value = float(env[node.name])
    elif isinstance(node, Neg):
        value = -_eval(node.operand, env)
    elif isinstance(node, BinOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        op = node.op
        if op == "+":
            value = a + b
        elif op == "-":
            value = a - b
        elif op == "*":
            value = a * b
        elif op == "/":
            if b == 0.0:
                raise DivisionByZeroError("division by zero")
            value = a / b
        elif op == "^":
            value = _power(a, b)
        else:
            raise ValueError(f"unknown operator {op!r}")
    elif isinstance(node, Call):
        value = _apply(node.name, [_eval(a, env) for a in node.args])
    else:
        raise TypeError(f"not an expression node: {node!r}")
    if not math.isfinite(value):
        raise NonFiniteError("non-finite intermediate result")
    return value


def eval_expression(expr: Expr | str, bindings: Mapping[str, float] | None = None) -> float:
    if isinstance(expr, str):
        expr = parse_expression(expr)
    return _eval(expr, bindings or {})


_FMT_CONTEXT = Context(prec=800)
_QUANTUM = Decimal("0.000001")


def format_number(value: float | int) -> str:
    """Canonical rendering: at most 6 fractional digits, half-even, zeros trimmed."""
    if isinstance(value, bool):
        value = int(value)
    if isinstance(value, int):
        return str(value)
    if not math.isfinite(value):
        raise NonFiniteError(f"cannot format {value!r}")
    q = Decimal(repr(float(value))).quantize(_QUANTUM, rounding=ROUND_HALF_EVEN, context=_FMT_CONTEXT)
    s = format(q, "f")
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    if s in ("-0", ""):
        s = "0"
    return s
