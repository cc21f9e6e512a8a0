"""Scenario pipelines: fixed agent sequences recorded as replayable traces."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Sequence

from . import agents
from .agents import ContextBlock, GroundedAnswer
from .fin_ratios import (
    FinancialStatements,
    RatioEntry,
    RatioReport,
    StatementValidationError,
    note_for_error,
    ratio_catalog,
    validate,
)
from .knowledge_store import KnowledgeStore, RetrievalHit
from .llm_backend import LLMBackend, RecordingBackend, ScriptedBackend
from .mathtools import MathError, format_number, parse_expression
from .templates import PromptLibrary, default_library
from .tool_protocol import ARROW, ToolCall, ToolRegistry, ToolResult, execute_call

PEST_HEADER = "## PEST 分析 (PEST Analysis)"
SWOT_HEADER = "## SWOT 分析 (SWOT Analysis)"
RATIO_HEADER = "## 关键财务比率 (Key Ratios)"
NO_TERMS_NOTE = "no-terms fast path"
UNIDENTIFIED_NOTE = "unidentified industry"


class ScenarioKind(str, Enum):
    MACRO = "macro"
    INDUSTRY = "industry"
    COMPANY = "company"
    STATEMENTS = "statements"


# Full agent sequence per scenario; macro step 2 and industry step 3 are conditional.
SCENARIO_STEPS = {
    ScenarioKind.MACRO: ["DocumentAnalyzer", "Consultant", "Analyst", "Consultant"],
    ScenarioKind.INDUSTRY: ["DocumentAnalyzer", "Analyst", "Analyst", "Consultant"],
    ScenarioKind.COMPANY: ["DocumentAnalyzer", "Analyst", "Consultant"],
    ScenarioKind.STATEMENTS: ["Analyst", "Accountant", "Consultant"],
}


class WorkflowError(RuntimeError):
    def __init__(self, message: str, trace: "WorkflowTrace", step: str):
        super().__init__(message)
        self.trace = trace
        self.step = step


def _digest(text: str) -> str:
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


@dataclass
class SubStep:
    name: str
    agent: str
    output: str
    retrieval: list[dict] = field(default_factory=list)


@dataclass
class WorkflowStep:
    ordinal: int
    agent: str
    label: str
    input_digest: str
    output_digest: str
    output: str
    tool_calls: list[dict] = field(default_factory=list)
    retrieval: list[dict] = field(default_factory=list)
    substeps: list[SubStep] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    started: str = ""
    ended: str = ""


@dataclass
class WorkflowTrace:
    scenario: ScenarioKind
    query: str
    steps: list[WorkflowStep] = field(default_factory=list)
    final_report: str = ""
    template_hashes: dict[str, str] = field(default_factory=dict)
    options: dict[str, Any] = field(default_factory=dict)
    statements: dict | None = None
    replies: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    error: dict | None = None
    trace_id: str = ""
    created: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkflowTrace":
        steps = []
        for s in d.get("steps", []):
            s = dict(s)
            s["substeps"] = [SubStep(**x) for x in s.get("substeps", [])]
            steps.append(WorkflowStep(**s))
        rest = {k: v for k, v in d.items() if k not in ("steps", "scenario")}
        return cls(scenario=ScenarioKind(d["scenario"]), steps=steps, **rest)

    @property
    def agents(self) -> list[str]:
        return [s.agent for s in self.steps]


@dataclass
class WorkflowDeps:
    backend: LLMBackend
    store: KnowledgeStore
    registry: ToolRegistry = field(default_factory=ToolRegistry)
    prompts: PromptLibrary = field(default_factory=default_library)
    analysis_kbs: Sequence[str] | None = None  # None: every kb except the news kb
    news_kb: str = "news"
    k: int = 3
    context_budget: int = agents.DEFAULT_CONTEXT_BUDGET

    def kbs(self) -> list[str]:
        if self.analysis_kbs is not None:
            return list(self.analysis_kbs)
        return [n for n in self.store.kb_names() if n != self.news_kb]


def _hits(hits: Sequence[RetrievalHit]) -> list[dict]:
    return [{"kb_name": h.kb_name, "doc_id": h.chunk.doc_id, "ordinal": h.chunk.ordinal, "score": h.score}
            for h in hits]


def _call_record(call: ToolCall, result: ToolResult, origin: str = "model") -> dict:
    return {"call": call.to_dict(), "result": result.to_dict(), "origin": origin}


@dataclass
class _Outcome:
    output: str
    input_text: str
    tool_calls: list[dict] = field(default_factory=list)
    retrieval: list[dict] = field(default_factory=list)
    substeps: list[SubStep] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


class _Run:
    def __init__(self, scenario: ScenarioKind, query: str, deps: WorkflowDeps, options: dict,
                 statements: dict | None = None):
        self.recorder = RecordingBackend(deps.backend)
        self.deps = deps
        self.trace = WorkflowTrace(scenario, query, template_hashes=deps.prompts.hashes(), options=options,
                                   statements=statements, created=_now())

    @property
    def backend(self) -> LLMBackend:
        return self.recorder

    def step(self, agent: str, label: str, fn: Callable[[], _Outcome]) -> _Outcome:
        started = _now()
        try:
            out = fn()
        except Exception as exc:
            self.trace.replies = list(self.recorder.replies)
            self.trace.error = {"step": label, "agent": agent, "type": type(exc).__name__, "message": str(exc)}
            raise WorkflowError(f"step {label!r} ({agent}) failed: {exc}", self.trace, label) from exc
        self.trace.steps.append(WorkflowStep(
            ordinal=len(self.trace.steps) + 1, agent=agent, label=label,
            input_digest=_digest(out.input_text), output_digest=_digest(out.output), output=out.output,
            tool_calls=out.tool_calls, retrieval=out.retrieval, substeps=out.substeps, notes=out.notes,
            started=started, ended=_now(),
        ))
        return out

    def finish(self) -> WorkflowTrace:
        self.trace.final_report = self.trace.steps[-1].output
        self.trace.replies = list(self.recorder.replies)
        return self.trace


def _analyst(run: _Run, question: str, kbs: Sequence[str], retrieval_query: str) -> GroundedAnswer:
    d = run.deps
    return agents.run_analyst(question, kbs, d.k, run.backend, d.store, d.prompts, retrieval_query=retrieval_query)


def _consult(run: _Run, question: str, blocks: list[ContextBlock], task: str) -> str:
    d = run.deps
    return agents.run_consultant(question, blocks, run.backend, d.prompts, task=task, budget_tokens=d.context_budget)


def run_macro(query: str, deps: WorkflowDeps) -> WorkflowTrace:
    run = _Run(ScenarioKind.MACRO, query, deps, {})
    p = deps.prompts

    def keywords() -> _Outcome:
        out = agents.run_document_analyzer("keywords", query, run.backend, p)
        return _Outcome(json.dumps({"keywords": out.payload}, ensure_ascii=False), query)

    terms = json.loads(run.step("DocumentAnalyzer", "extract_terms", keywords).output)["keywords"]
    joined = "、".join(terms)
    explanation = ""
    if terms:
        def explain() -> _Outcome:
            question = p.render("workflows", "macro_explain", terms=joined)
            return _Outcome(_consult(run, question, [], "macro.explain"), question)
        explanation = run.step("Consultant", "explain_terms", explain).output
    else:
        run.trace.notes.append(NO_TERMS_NOTE)

    def supplement() -> _Outcome:
        question = p.render("workflows", "macro_supplement", query=query, terms=joined or "（无）")
        ans = _analyst(run, question, deps.kbs(), f"{query} {joined}".strip())
        notes = ["no reference found"] if ans.no_reference else []
        return _Outcome(ans.answer, question, retrieval=_hits(ans.hits_used), notes=notes)

    supplementary = run.step("Analyst", "gather_supplementary", supplement).output

    def compile_() -> _Outcome:
        blocks = []
        if explanation:
            blocks.append(ContextBlock("术语解释", explanation))
        blocks.append(ContextBlock("补充资料", supplementary))
        question = p.render("workflows", "macro_compile", query=query)
        return _Outcome(_consult(run, question, blocks, "macro.compile"), question)

    run.step("Consultant", "compile_response", compile_)
    return run.finish()


def _entity_names(payload: list[tuple[str, str]]) -> list[str]:
    seen: list[str] = []
    for name, _ in payload:
        if name and name not in seen:
            seen.append(name)
    return seen


def run_industry(query: str, include_news: bool, deps: WorkflowDeps) -> WorkflowTrace:
    run = _Run(ScenarioKind.INDUSTRY, query, deps, {"include_news": include_news})
    p = deps.prompts

    def identify() -> _Outcome:
        out = agents.run_document_analyzer("entities", query, run.backend, p)
        return _Outcome(json.dumps({"entities": out.payload}, ensure_ascii=False), query)

    entities = json.loads(run.step("DocumentAnalyzer", "identify_targets", identify).output)["entities"]
    targets = "、".join(_entity_names(entities))
    if not targets:
        run.trace.notes.append(UNIDENTIFIED_NOTE)

    def explore() -> _Outcome:
        question = p.render("workflows", "industry_explore", targets=targets or query, query=query)
        ans = _analyst(run, question, deps.kbs(), f"{query} {targets}".strip())
        return _Outcome(ans.answer, question, retrieval=_hits(ans.hits_used))

    exploration = run.step("Analyst", "explore_dynamics", explore).output
    news = ""
    if include_news:
        def recent_news() -> _Outcome:
            question = p.render("workflows", "industry_news", targets=targets or query)
            ans = _analyst(run, question, [deps.news_kb], f"{query} {targets}".strip())
            return _Outcome(ans.answer, question, retrieval=_hits(ans.hits_used))
        news = run.step("Analyst", "recent_news", recent_news).output

    def summarize() -> _Outcome:
        blocks = [ContextBlock("相关行业与公司", targets or f"未识别行业 ({UNIDENTIFIED_NOTE})"),
                  ContextBlock("竞争格局、供应链与发展趋势", exploration)]
        if news:
            blocks.append(ContextBlock("近期新闻", news))
        question = p.render("workflows", "industry_summary", query=query)
        notes = [] if targets else [UNIDENTIFIED_NOTE]
        return _Outcome(_consult(run, question, blocks, "industry.summary"), question, notes=notes)

    run.step("Consultant", "strategic_summary", summarize)
    return run.finish()


def run_company(query: str, with_sentiment: bool, deps: WorkflowDeps) -> WorkflowTrace:
    run = _Run(ScenarioKind.COMPANY, query, deps, {"with_sentiment": with_sentiment})
    p = deps.prompts

    def extract() -> _Outcome:
        out = agents.run_document_analyzer("entities", query, run.backend, p)
        return _Outcome(json.dumps({"entities": out.payload}, ensure_ascii=False), query)

    entities = json.loads(run.step("DocumentAnalyzer", "extract_company", extract).output)["entities"]
    companies = [n for n, t in entities if "company" in t.lower() or "公司" in t] or _entity_names(entities)
    company = companies[0] if companies else query
    sections: dict[str, str] = {}

    def analyze() -> _Outcome:
        subs = []
        retrieval = []
        for name, section in (("pest", "company_pest"), ("swot", "company_swot")):
            question = p.render("workflows", section, company=company, query=query)
            ans = _analyst(run, question, deps.kbs(), f"{company} {query}")
            sections[name] = ans.answer
            subs.append(SubStep(name, "Analyst", ans.answer, _hits(ans.hits_used)))
            retrieval += _hits(ans.hits_used)
        output = f"{PEST_HEADER}\n{sections['pest']}\n\n{SWOT_HEADER}\n{sections['swot']}"
        if with_sentiment:
            news_kbs = [deps.news_kb] if deps.store.has_kb(deps.news_kb) else deps.kbs()
            hits = agents.retrieve_merged(deps.store, news_kbs, f"{company} {query}", deps.k)
            text = "\n".join(h.chunk.text for h in hits) or query
            label = agents.run_document_analyzer("sentiment", text, run.backend, p).payload
            sections["sentiment"] = label
            subs.append(SubStep("sentiment", "DocumentAnalyzer", label, _hits(hits)))
            retrieval += _hits(hits)
            output += f"\n\n舆情情感 (sentiment): {label}"
        return _Outcome(output, query, retrieval=retrieval, substeps=subs)

    run.step("Analyst", "pest_swot", analyze)

    def assess() -> _Outcome:
        blocks = [ContextBlock("公司信息", company), ContextBlock("PEST 分析", sections["pest"]),
                  ContextBlock("SWOT 分析", sections["swot"])]
        if "sentiment" in sections:
            blocks.append(ContextBlock("舆情情感", sections["sentiment"]))
        question = p.render("workflows", "company_assess", query=query)
        assessment = _consult(run, question, blocks, "company.assess")
        report = f"{assessment.strip()}\n\n{PEST_HEADER}\n{sections['pest'].strip()}\n\n{SWOT_HEADER}\n{sections['swot'].strip()}"
        return _Outcome(report, question)

    run.step("Consultant", "synthesized_assessment", assess)
    return run.finish()


def render_statements(st: FinancialStatements) -> str:
    unit = f"（单位：{st.currency_unit}）" if st.currency_unit else ""
    lines = [f"报告期：{st.period or '未注明'} {unit}".rstrip()]
    for title, part in (("资产负债表", st.balance_sheet), ("利润表", st.income_statement), ("现金流量表", st.cash_flow)):
        lines.append(f"{title}:")
        for k, v in asdict(part).items():
            if v is not None:
                lines.append(f"  {k}: {format_number(v)}")
    return "\n".join(lines)


def _same_expression(a: str, b: str) -> bool:
    if "".join(a.split()) == "".join(b.split()):
        return True
    try:
        return parse_expression(a) == parse_expression(b)
    except MathError:
        return False


def _ratio_value(result: ToolResult) -> tuple[float | None, str | None]:
    if result.error is not None:
        return None, note_for_error(result.error)
    return float(result.value), None


def render_ratio_table(report: RatioReport, rendered: dict[str, str]) -> str:
    lines = []
    for e in report.entries:
        shown = rendered.get(e.name, e.note or "")
        lines.append(f"- {e.name} ({e.category}): {shown}  [Calculator({e.formula_expression}){ARROW}{rendered.get(e.name, 'ERROR')}]"
                     if e.name in rendered else f"- {e.name} ({e.category}): {shown}")
    return "\n".join(lines)


def run_statement_analysis(statements: FinancialStatements | dict, deps: WorkflowDeps,
                           query: str = "") -> WorkflowTrace:
    if isinstance(statements, dict):
        statements = FinancialStatements.from_dict(statements)
    violations = validate(statements)
    if violations:
        raise StatementValidationError(violations)
    run = _Run(ScenarioKind.STATEMENTS, query or f"financial statement analysis {statements.period}".strip(),
               deps, {}, statements=statements.to_dict())
    p = deps.prompts
    table = render_statements(statements)

    def summarize() -> _Outcome:
        return _Outcome(agents.run_analyst_statements(table, run.backend, p), table)

    summary = run.step("Analyst", "data_summary", summarize).output
    catalog = ratio_catalog(statements)
    report = RatioReport()
    rendered: dict[str, str] = {}

    def compute() -> _Outcome:
        listing = "\n".join(f"- {e.name} ({e.category}): {e.formula_expression}" for e in catalog)
        question = p.render("workflows", "statement_ratios", catalog=listing)
        gen = agents.run_accountant(question, run.backend, deps.registry, p)
        text = gen.final_text
        records = [_call_record(c, r) for c, r in gen.calls]
        pool = [(c, r) for c, r in gen.calls if c.tool_name == "Calculator"]
        notes = ["tool budget exceeded"] if gen.budget_exceeded else []
        for entry in catalog:
            match = next(((c, r) for c, r in pool if _same_expression(c.args_raw, entry.formula_expression)), None)
            if match is None:
                # The model skipped this ratio; run the command on its behalf so the value still comes from a tool.
                text += "\n" if text and not text.endswith("\n") else ""
                start = len(text)
                text += f"[Calculator({entry.formula_expression}){ARROW}"
                call = ToolCall("Calculator", entry.formula_expression,
                                (len(text[:start].encode("utf-8")), len(text.encode("utf-8"))), (start, len(text)))
                result = execute_call(call, deps.registry)
                text += result.rendered + "]"
                records.append(_call_record(call, result, origin="backfill"))
                notes.append(f"backfilled {entry.name}")
                match = (call, result)
            else:
                pool.remove(match)
            value, note = _ratio_value(match[1])
            report.entries.append(RatioEntry(entry.name, entry.category, entry.formula_expression, value, note))
            if value is not None:
                rendered[entry.name] = match[1].rendered
        return _Outcome(text, question, tool_calls=records, notes=notes)

    run.step("Accountant", "compute_ratios", compute)
    ratio_table = render_ratio_table(report, rendered)

    def write_report() -> _Outcome:
        blocks = [ContextBlock("财务数据概要", summary), ContextBlock("关键财务比率", ratio_table)]
        question = p.render("workflows", "statement_report", period=statements.period or "未注明")
        text = _consult(run, question, blocks, "statements.report")
        return _Outcome(f"{text.strip()}\n\n{RATIO_HEADER}\n{ratio_table}", question)

    run.step("Consultant", "actionable_report", write_report)
    trace = run.finish()
    trace.options["ratios"] = report.to_dict()
    return trace


_SCENARIO_ALIASES = {"statementanalysis": ScenarioKind.STATEMENTS, "statement": ScenarioKind.STATEMENTS}


def parse_scenario(name: str) -> ScenarioKind:
    key = name.strip().lower().replace("_", "").replace("-", "")
    if key in _SCENARIO_ALIASES:
        return _SCENARIO_ALIASES[key]
    try:
        return ScenarioKind(key)
    except ValueError:
        choices = ", ".join(k.value for k in ScenarioKind)
        raise ValueError(f"unknown scenario {name!r} (choose from {choices})") from None


def run_scenario(scenario: ScenarioKind | str, query: str, deps: WorkflowDeps, options: dict | None = None,
                 statements: FinancialStatements | dict | None = None) -> WorkflowTrace:
    scenario = parse_scenario(scenario)
    options = options or {}
    if scenario is ScenarioKind.MACRO:
        return run_macro(query, deps)
    if scenario is ScenarioKind.INDUSTRY:
        return run_industry(query, bool(options.get("include_news", False)), deps)
    if scenario is ScenarioKind.COMPANY:
        return run_company(query, bool(options.get("with_sentiment", False)), deps)
    if statements is None:
        raise StatementValidationError(["statements scenario requires financial statements"])
    return run_statement_analysis(statements, deps, query)


def replay(trace: WorkflowTrace, deps: WorkflowDeps) -> WorkflowTrace:
    """Re-run ``trace`` against its recorded backend replies."""
    scripted = ScriptedBackend.from_replies(trace.replies)
    replay_deps = WorkflowDeps(scripted, deps.store, deps.registry, deps.prompts, deps.analysis_kbs,
                               deps.news_kb, deps.k, deps.context_budget)
    return run_scenario(trace.scenario, trace.query, replay_deps, trace.options, trace.statements)


INTENT_TO_SCENARIO = {"macro": ScenarioKind.MACRO, "industry": ScenarioKind.INDUSTRY,
                      "company": ScenarioKind.COMPANY, "statements": ScenarioKind.STATEMENTS}


def route_scenario(query: str, backend: LLMBackend, prompts: PromptLibrary | None = None) -> ScenarioKind | None:
    """Optional auto-router: map the analyzer's intent label to a scenario."""
    label = agents.run_document_analyzer("intent", query, backend, prompts).payload
    return INTENT_TO_SCENARIO.get(label.strip().lower())


_id_lock = threading.Lock()


def save_trace(trace: WorkflowTrace, runs_dir: str | Path) -> Path:
    """Write ``runs/<timestamp>-<scenario>.json``; sets ``trace.trace_id``."""
    runs = Path(runs_dir)
    runs.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    with _id_lock:
        base = f"{stamp}-{trace.scenario.value}"
        trace_id, n = base, 1
        while (runs / f"{trace_id}.json").exists():
            n += 1
            trace_id = f"{base}-{n}"
        trace.trace_id = trace_id
        path = runs / f"{trace_id}.json"
        path.write_text(trace.to_json(), encoding="utf-8")
    return path


def load_trace(runs_dir: str | Path, trace_id: str) -> WorkflowTrace:
    if "/" in trace_id or "\\" in trace_id or trace_id.startswith("."):
        raise FileNotFoundError(trace_id)
    path = Path(runs_dir) / f"{trace_id}.json"
    return WorkflowTrace.from_dict(json.loads(path.read_text(encoding="utf-8")))
