"""Financial statement data model and the ratio catalog used by the accountant."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional

from .mathtools import DivisionByZeroError, MathError, eval_expression

IDENTITY_TOLERANCE = 0.005

CATEGORIES = ("profitability", "liquidity", "leverage", "growth")
ZERO_DENOMINATOR_NOTE = "undefined (zero denominator)"


class StatementValidationError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass
class BalanceSheet:
    total_assets: float
    current_assets: float
    inventories: float
    total_liabilities: float
    current_liabilities: float
    shareholders_equity: float


@dataclass
class IncomeStatement:
    revenue: float
    cost_of_goods_sold: float
    operating_income: float
    net_income: float
    prior_revenue: Optional[float] = None


@dataclass
class CashFlow:
    operating_cash_flow: float
    investing_cash_flow: float
    financing_cash_flow: float


@dataclass
class FinancialStatements:
    balance_sheet: BalanceSheet
    income_statement: IncomeStatement
    cash_flow: CashFlow
    period: str = ""
    currency_unit: str = ""

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FinancialStatements":
        """Build from the JSON schema; missing or non-numeric fields raise StatementValidationError."""
        problems: list[str] = []

        def section(name: str, kind: type) -> Any:
            raw = data.get(name)
            if not isinstance(raw, dict):
                problems.append(f"missing section {name}")
                return None
            kwargs = {}
            for f in fields(kind):
                if f.name not in raw or raw[f.name] is None:
                    if f.default is None:
                        continue
                    problems.append(f"missing field {name}.{f.name}")
                    continue
                try:
                    kwargs[f.name] = float(raw[f.name])
                except (TypeError, ValueError):
                    problems.append(f"field {name}.{f.name} is not a number")
            try:
                return kind(**kwargs)
            except TypeError:
                return None

        bs = section("balance_sheet", BalanceSheet)
        inc = section("income_statement", IncomeStatement)
        cf = section("cash_flow", CashFlow)
        if problems:
            raise StatementValidationError(problems)
        return cls(bs, inc, cf, str(data.get("period", "")), str(data.get("currency_unit", "")))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def scaled(self, c: float) -> "FinancialStatements":
        def mul(obj):
            return type(obj)(**{k: (None if v is None else v * c) for k, v in asdict(obj).items()})
        return FinancialStatements(mul(self.balance_sheet), mul(self.income_statement), mul(self.cash_flow),
                                   self.period, self.currency_unit)


def validate(statements: FinancialStatements) -> list[str]:
    """All violated invariants; an empty list means the statements are valid."""
    violations: list[str] = []
    monetary = {}
    for part in ("balance_sheet", "income_statement", "cash_flow"):
        for k, v in asdict(getattr(statements, part)).items():
            if v is None:
                continue
            monetary[f"{part}.{k}"] = v
            if not math.isfinite(v):
                violations.append(f"{part}.{k} is not finite")
    bs = statements.balance_sheet
    if all(math.isfinite(x) for x in (bs.total_assets, bs.total_liabilities, bs.shareholders_equity)):
        gap = abs(bs.total_assets - (bs.total_liabilities + bs.shareholders_equity))
        if gap > IDENTITY_TOLERANCE * abs(bs.total_assets) or (bs.total_assets == 0 and gap > 0):
            rel = gap / abs(bs.total_assets) if bs.total_assets else math.inf
            violations.append(
                f"total_assets {bs.total_assets:g} != total_liabilities + shareholders_equity "
                f"{bs.total_liabilities + bs.shareholders_equity:g} ({rel:.1%} imbalance)"
            )
    if bs.current_assets > bs.total_assets:
        violations.append(f"current_assets {bs.current_assets:g} exceeds total_assets {bs.total_assets:g}")
    return violations


def _lit(x: float) -> str:
    s = str(int(x)) if float(x).is_integer() and abs(x) < 1e15 else repr(float(x))
    return f"({s})" if x < 0 else s


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    category: str
    formula_expression: str


def ratio_catalog(statements: FinancialStatements) -> list[CatalogEntry]:
    bs, inc = statements.balance_sheet, statements.income_statement
    ca, cl, inv = _lit(bs.current_assets), _lit(bs.current_liabilities), _lit(bs.inventories)
    ta, tl, eq = _lit(bs.total_assets), _lit(bs.total_liabilities), _lit(bs.shareholders_equity)
    rev, cogs, ni = _lit(inc.revenue), _lit(inc.cost_of_goods_sold), _lit(inc.net_income)
    entries = [
        CatalogEntry("current ratio", "liquidity", f"{ca}/{cl}"),
        CatalogEntry("quick ratio", "liquidity", f"({ca}-{inv})/{cl}"),
        CatalogEntry("debt-to-assets", "leverage", f"{tl}/{ta}"),
        CatalogEntry("debt-to-equity", "leverage", f"{tl}/{eq}"),
        CatalogEntry("gross margin", "profitability", f"({rev}-{cogs})/{rev}"),
        CatalogEntry("net margin", "profitability", f"{ni}/{rev}"),
        CatalogEntry("ROA", "profitability", f"{ni}/{ta}"),
        CatalogEntry("ROE", "profitability", f"{ni}/{eq}"),
    ]
    if inc.prior_revenue is not None:
        prev = _lit(inc.prior_revenue)
        entries.append(CatalogEntry("revenue growth", "growth", f"({rev}-{prev})/{prev}"))
    return entries


@dataclass
class RatioEntry:
    name: str
    category: str
    formula_expression: str
    value: Optional[float] = None
    note: Optional[str] = None

    def __post_init__(self) -> None:
        if (self.value is None) == (self.note is None):
            raise ValueError("a ratio carries either a value or a note explaining its absence")


@dataclass
class RatioReport:
    entries: list[RatioEntry] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"entries": [asdict(e) for e in self.entries]}

    def get(self, name: str) -> RatioEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def note_for_error(kind: str) -> str:
    return ZERO_DENOMINATOR_NOTE if kind == DivisionByZeroError.kind else f"undefined ({kind})"


def evaluate_catalog(statements: FinancialStatements) -> RatioReport:
    """Evaluate every catalog expression directly with the calculator."""
    report = RatioReport()
    for entry in ratio_catalog(statements):
        try:
            report.entries.append(RatioEntry(entry.name, entry.category, entry.formula_expression,
                                             value=eval_expression(entry.formula_expression)))
        except MathError as exc:
            report.entries.append(RatioEntry(entry.name, entry.category, entry.formula_expression,
                                             note=note_for_error(exc.kind)))
    return report


def growth_rate(previous: float, current: float) -> float:
    if previous == 0:
        raise DivisionByZeroError("growth rate from a zero base")
    return (current - previous) / previous
