"""Evaluation: LLM-judge scoring, human-pick tallies, paired t-tests and task metrics."""

from __future__ import annotations

import json
import logging
import math
import random
import re
import statistics
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .agents import parse_json_object
from .llm_backend import ChatMessage, LLMBackend, make_request
from .mathtools import MathError, eval_expression, free_variables, parse_expression
from .templates import PromptLibrary, default_library
from .text import tokenize

log = logging.getLogger(__name__)

DIMENSIONS = ("accuracy", "thoroughness", "clarity", "professionalism")
DEFAULT_JUDGE_WORKERS = 4


class JudgeParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class JudgeRangeError(ValueError):
    pass


@dataclass(frozen=True)
class JudgeScore:
    accuracy: int
    thoroughness: int
    clarity: int
    professionalism: int
    overall: float

    def __post_init__(self) -> None:
        for name in DIMENSIONS:
            v = getattr(self, name)
            if not 1 <= v <= 5:
                raise JudgeRangeError(f"{name}={v} outside [1, 5]")
        if not 1 <= self.overall <= 5:
            raise JudgeRangeError(f"overall={self.overall} outside [1, 5]")

    @property
    def dimension_mean(self) -> float:
        """Unweighted mean of the four dimensions, kept next to the judge's own overall."""
        return statistics.fmean(getattr(self, d) for d in DIMENSIONS)

    def to_dict(self) -> dict:
        return asdict(self)


def _score_value(obj: dict, key: str, integral: bool) -> float:
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError(f"{key} is not a number")
    if integral:
        if not float(v).is_integer():
            raise TypeError(f"{key} must be an integer")
        return int(v)
    return float(v)


def parse_judge_reply(reply: str) -> JudgeScore:
    """Raises JudgeRangeError for well-formed but out-of-range scores, other ValueErrors otherwise."""
    obj = parse_json_object(reply)
    try:
        values = {d: _score_value(obj, d, True) for d in DIMENSIONS}
        values["overall"] = _score_value(obj, "overall", False)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"judge reply missing or malformed field: {exc}") from exc
    return JudgeScore(**values)


def judge_score(question: str, response: str, judge_backend: LLMBackend,
                prompts: PromptLibrary | None = None) -> JudgeScore:
    prompts = prompts or default_library()
    request = make_request(prompts.section("judge", "system"),
                           prompts.render("judge", "user", question=question, response=response), temperature=0.0)
    raw = judge_backend.complete(request)
    try:
        return parse_judge_reply(raw)
    except JudgeRangeError:
        raise
    except ValueError:
        log.info("judge reply unparseable, asking for a repair")
    request = request.extended(ChatMessage("assistant", raw), ChatMessage("user", prompts.section("judge", "repair")))
    raw = judge_backend.complete(request)
    try:
        return parse_judge_reply(raw)
    except JudgeRangeError:
        raise
    except ValueError as exc:
        raise JudgeParseError(f"judge reply unparseable after retry: {exc}", raw) from exc


@dataclass
class BatchJudgeResult:
    scores: list[JudgeScore]
    means: dict[str, float]


def dimension_means(scores: Sequence[JudgeScore]) -> dict[str, float]:
    if not scores:
        raise ValueError("no scores to average")
    keys = DIMENSIONS + ("overall",)
    return {k: statistics.fmean(getattr(s, k) for s in scores) for k in keys}


def judge_batch(items: Sequence[tuple[str, str]], judge_backend: LLMBackend, prompts: PromptLibrary | None = None,
                workers: int = DEFAULT_JUDGE_WORKERS) -> BatchJudgeResult:
    """Score (question, response) pairs with at most ``workers`` judge calls in flight."""
    prompts = prompts or default_library()
    if workers <= 1:
        scores = [judge_score(q, r, judge_backend, prompts) for q, r in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(lambda qr: judge_score(qr[0], qr[1], judge_backend, prompts), items))
    return BatchJudgeResult(scores, dimension_means(scores))


@dataclass
class PickTally:
    wins: dict[str, int]
    total: int

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.wins.values()):
            raise ValueError("win counts must be non-negative")
        if sum(self.wins.values()) != self.total:
            raise ValueError(f"wins sum to {sum(self.wins.values())}, total is {self.total}")

    @classmethod
    def from_picks(cls, picks: Sequence[str], models: Sequence[str] = ()) -> "PickTally":
        counts = Counter(picks)
        wins = {m: 0 for m in models}
        wins.update(counts)
        return cls(wins, len(picks))


def acceptance_rate(tally: PickTally, model: str) -> float:
    if tally.total <= 0:
        raise ValueError("tally is empty")
    return tally.wins.get(model, 0) / tally.total


# Student's t distribution via the regularized incomplete beta function.

_BETA_EPS = 4e-16
_BETA_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    # Modified Lentz evaluation of the continued fraction for I_x(a, b).
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _BETA_TINY else _BETA_TINY)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _BETA_TINY else _BETA_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _BETA_TINY else _BETA_TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _BETA_TINY else _BETA_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _BETA_TINY else _BETA_TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_tailed_p(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return min(1.0, max(0.0, betainc(df / 2.0, 0.5, df / (df + t * t))))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_two_tailed_p(t, df)
    return 1.0 - tail if t >= 0 else tail


@dataclass(frozen=True)
class PairedTestResult:
    t_statistic: float
    p_value: float
    degrees_of_freedom: float
    n: int
    variant: str = "paired"


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float], welch: bool = False) -> PairedTestResult:
    """Two-tailed paired Student's t; ``welch=True`` switches to the unequal-variance two-sample test."""
    if len(scores_a) != len(scores_b):
        raise ValueError(f"length mismatch: {len(scores_a)} vs {len(scores_b)}")
    n = len(scores_a)
    if n < 2:
        raise ValueError("need at least two pairs")
    if welch:
        return _welch(scores_a, scores_b)
    d = [float(a) - float(b) for a, b in zip(scores_a, scores_b)]
    mean = math.fsum(d) / n
    var = math.fsum((x - mean) ** 2 for x in d) / (n - 1)
    if var == 0.0:
        raise ValueError("differences have zero variance")
    t = mean / math.sqrt(var / n)
    return PairedTestResult(t, t_two_tailed_p(t, n - 1), n - 1, n)


def _welch(a: Sequence[float], b: Sequence[float]) -> PairedTestResult:
    na, nb = len(a), len(b)
    ma, mb = statistics.fmean(a), statistics.fmean(b)
    va, vb = statistics.variance(a), statistics.variance(b)
    se2 = va / na + vb / nb
    if se2 == 0.0:
        raise ValueError("both samples have zero variance")
    t = (ma - mb) / math.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return PairedTestResult(t, t_two_tailed_p(t, df), df, na, variant="welch")


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    c, r = tokenize(candidate), tokenize(reference)
    if not c and not r:
        return 1.0
    if not c or not r:
        return 0.0
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


def f1_extraction(predicted: set, gold: set) -> float:
    predicted, gold = set(predicted), set(gold)
    if not predicted and not gold:
        return 1.0
    tp = len(predicted & gold)
    p = tp / len(predicted) if predicted else 0.0
    r = tp / len(gold) if gold else 0.0
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


_FULLWIDTH = str.maketrans("ＡＢＣＤ", "ABCD")
_CUE_RE = re.compile(r"(?:正确答案|答案|选项|应选|选择|answer(?:\s+is)?)\s*(?:是|为|应为|:|：)?\s*[（(\[]?\s*([A-D])(?![A-Za-z0-9])",
                     re.IGNORECASE)
_LETTER_RE = re.compile(r"(?<![A-Za-z0-9])([A-D])(?![A-Za-z0-9]|股)")


def extract_option(response: str) -> str | None:
    """An explicit answer cue wins; otherwise the first standalone A-D letter."""
    text = response.translate(_FULLWIDTH)
    m = _CUE_RE.search(text) or _LETTER_RE.search(text)
    return m.group(1).upper() if m else None


def mc_accuracy(responses: Sequence[str], gold: Sequence[str]) -> float:
    if len(responses) != len(gold):
        raise ValueError(f"length mismatch: {len(responses)} vs {len(gold)}")
    if not responses:
        raise ValueError("no responses")
    correct = 0
    for i, (resp, g) in enumerate(zip(responses, gold)):
        letter = extract_option(resp)
        if letter is None:
            log.warning("no option letter in response %d: %.40r", i, resp)
            continue
        correct += letter == g.strip().translate(_FULLWIDTH).upper()
    return correct / len(responses)


FORMULA_POINTS = 8
FORMULA_TOL = 1e-6
RESULT_REL_TOL = 1e-4


def _formula_rhs(text: str) -> str:
    return text.replace("＝", "=").rsplit("=", 1)[-1]


def formulas_equivalent(a: str, b: str, points: int = FORMULA_POINTS, seed: int = 0) -> bool:
    """Agreement at ``points`` seeded random assignments of the free variables."""
    ea, eb = parse_expression(_formula_rhs(a)), parse_expression(_formula_rhs(b))
    names = sorted(set(free_variables(ea)) | set(free_variables(eb)))
    rng = random.Random(seed)
    for _ in range(points):
        env = {v: rng.uniform(0.5, 3.0) for v in names}
        try:
            va = eval_expression(ea, env)
        except MathError as exc:
            va = exc.kind
        try:
            vb = eval_expression(eb, env)
        except MathError as exc:
            vb = exc.kind
        if isinstance(va, str) or isinstance(vb, str):
            if va != vb:
                return False
            continue
        if abs(va - vb) > FORMULA_TOL * max(1.0, abs(va), abs(vb)):
            return False
    return True


def results_match(extracted, gold) -> bool:
    try:
        x, g = float(str(extracted).strip().rstrip("%")), float(str(gold).strip().rstrip("%"))
    except ValueError:
        return str(extracted).strip() == str(gold).strip()
    return math.isclose(x, g, rel_tol=RESULT_REL_TOL, abs_tol=1e-12)


def formula_result_accuracy(records: Sequence[Mapping]) -> dict[str, float]:
    if not records:
        return {"formula_acc": 0.0, "formula_and_result_acc": 0.0}
    formula_ok = both_ok = 0
    for i, rec in enumerate(records):
        try:
            f_ok = formulas_equivalent(str(rec["extracted_formula"]), str(rec["gold_formula"]))
        except MathError as exc:
            log.warning("record %d: unparseable formula (%s), counted as mismatch", i, exc)
            f_ok = False
        formula_ok += f_ok
        both_ok += f_ok and results_match(rec["extracted_result"], rec["gold_result"])
    n = len(records)
    return {"formula_acc": formula_ok / n, "formula_and_result_acc": both_ok / n}


@dataclass
class EvalItem:
    question: str
    responses: dict[str, str]
    item_id: str = ""
    pick: str | None = None


def load_eval_items(path: str | Path) -> list[EvalItem]:
    """JSONL of ``{question, responses: {model: text}}``; optional ``id`` and human ``pick``."""
    items = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        d = json.loads(line)
        items.append(EvalItem(d["question"], dict(d["responses"]), str(d.get("id", n)), d.get("pick")))
    return items


@dataclass
class JudgeRunResult:
    per_model: dict[str, dict[str, float]]
    scores: dict[str, list[dict]] = field(default_factory=dict)
    tally: dict | None = None
    rates: dict[str, float] | None = None
    tests: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def run_judge_eval(items: Sequence[EvalItem], judge_backend: LLMBackend, prompts: PromptLibrary | None = None,
                   workers: int = DEFAULT_JUDGE_WORKERS, baseline: str | None = None) -> JudgeRunResult:
    """Judge every model's responses; paired tests compare each model against ``baseline`` per dimension."""
    models = sorted({m for it in items for m in it.responses})
    per_model, scores = {}, {}
    for m in models:
        batch = judge_batch([(it.question, it.responses[m]) for it in items], judge_backend, prompts, workers)
        per_model[m] = batch.means
        scores[m] = [s.to_dict() for s in batch.scores]
    result = JudgeRunResult(per_model, scores)
    picks = [it.pick for it in items if it.pick]
    if picks:
        tally = PickTally.from_picks(picks, models)
        result.tally = asdict(tally)
        result.rates = {m: acceptance_rate(tally, m) for m in tally.wins}
    if baseline is not None and baseline in scores:
        for m in models:
            if m == baseline:
                continue
            for dim in DIMENSIONS + ("overall",):
                a = [s[dim] for s in scores[m]]
                b = [s[dim] for s in scores[baseline]]
                try:
                    result.tests[f"{m}-vs-{baseline}:{dim}"] = asdict(paired_t_test(a, b))
                except ValueError as exc:
                    result.tests[f"{m}-vs-{baseline}:{dim}"] = {"error": str(exc)}
    return result
