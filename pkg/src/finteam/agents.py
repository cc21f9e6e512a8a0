"""The four agent roles: prompt assembly and reply post-processing."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Any, Sequence

from .knowledge_store import KnowledgeStore, RetrievalHit
from .llm_backend import ChatMessage, ChatRequest, LLMBackend, make_request
from .templates import PromptLibrary, default_library
from .tool_protocol import GenerationResult, ToolRegistry, run_tool_augmented_generation

log = logging.getLogger(__name__)

ANALYZER_TASKS = ("intent", "entities", "sentiment", "summary", "keywords")
SENTIMENTS = ("positive", "neutral", "negative")
NO_REFERENCE = "（未检索到相关参考资料 / no reference found）"
TRUNCATION_MARKER = "[truncated]"
DEFAULT_CONTEXT_BUDGET = 3000
CHARS_PER_TOKEN = 1.7


@dataclass(frozen=True)
class AgentRole:
    name: str
    template: str
    capabilities: frozenset[str]


ROLES = {
    "DocumentAnalyzer": AgentRole("DocumentAnalyzer", "document_analyzer", frozenset()),
    "Analyst": AgentRole("Analyst", "analyst", frozenset({"retrieval"})),
    "Accountant": AgentRole("Accountant", "accountant", frozenset({"tools"})),
    "Consultant": AgentRole("Consultant", "consultant", frozenset()),
}


class AnalyzerParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass
class AnalyzerOutput:
    task: str
    payload: Any
    retry_count: int = 0
    raw: str = ""


_FENCE_RE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.DOTALL)


def parse_json_object(reply: str) -> dict:
    """The reply must be exactly one JSON object (a surrounding code fence is tolerated)."""
    text = reply.strip()
    m = _FENCE_RE.match(text)
    if m:
        text = m.group(1)
    obj = json.loads(text)
    if not isinstance(obj, dict):
        raise ValueError("reply is JSON but not an object")
    return obj


def _payload(task: str, obj: dict) -> Any:
    value = obj[task]
    if task in ("intent", "summary"):
        if not isinstance(value, str) or not value.strip():
            raise ValueError(f"{task} must be a non-empty string")
        return value.strip()
    if task == "sentiment":
        label = str(value).strip().lower()
        if label not in SENTIMENTS:
            raise ValueError(f"sentiment must be one of {SENTIMENTS}")
        return label
    if task == "keywords":
        if not isinstance(value, list) or not all(isinstance(k, str) for k in value):
            raise ValueError("keywords must be a list of strings")
        return [k.strip() for k in value if k.strip()]
    if task == "entities":
        pairs = []
        for item in value:
            if isinstance(item, dict):
                item = [item.get("entity") or item.get("name"), item.get("type")]
            if not (isinstance(item, (list, tuple)) and len(item) == 2 and all(isinstance(x, str) for x in item)):
                raise ValueError("entities must be [entity, type] pairs")
            pairs.append((item[0], item[1]))
        return pairs
    raise ValueError(f"unknown analyzer task {task!r}")


def run_document_analyzer(task: str, text: str, backend: LLMBackend,
                          prompts: PromptLibrary | None = None) -> AnalyzerOutput:
    if task not in ANALYZER_TASKS:
        raise ValueError(f"task must be one of {ANALYZER_TASKS}")
    if not text.strip():
        raise ValueError("document analyzer needs non-empty text")
    prompts = prompts or default_library()
    request = make_request(prompts.section("document_analyzer", "system"),
                           prompts.render("document_analyzer", task, text=text))
    raw = backend.complete(request)
    for attempt in range(2):
        try:
            return AnalyzerOutput(task, _payload(task, parse_json_object(raw)), attempt, raw)
        except (ValueError, KeyError, TypeError) as exc:
            if attempt == 1:
                raise AnalyzerParseError(f"analyzer reply for {task} unusable after retry: {exc}", raw) from exc
            log.info("analyzer reply for %s was not valid JSON, retrying once", task)
            request = request.extended(ChatMessage("assistant", raw),
                                       ChatMessage("user", prompts.section("document_analyzer", "repair")))
            raw = backend.complete(request)
    raise AssertionError("unreachable")


@dataclass
class GroundedAnswer:
    answer: str
    citations: list[tuple[str, str, int]]
    hits_used: list[RetrievalHit]
    no_reference: bool = False

    def to_dict(self) -> dict:
        return {"answer": self.answer, "citations": [list(c) for c in self.citations],
                "hits_used": [h.to_dict() for h in self.hits_used], "no_reference": self.no_reference}


_CITATION_RE = re.compile(r"\[(\d+)\]")


def merge_hits(per_kb: Sequence[Sequence[RetrievalHit]]) -> list[RetrievalHit]:
    merged = [h for hits in per_kb for h in hits]
    merged.sort(key=lambda h: (-h.score, h.kb_name, h.chunk.doc_id, h.chunk.ordinal))
    return merged


def render_sources(hits: Sequence[RetrievalHit]) -> str:
    if not hits:
        return NO_REFERENCE
    blocks = []
    for n, h in enumerate(hits, 1):
        title = f" {h.chunk.title}" if h.chunk.title else ""
        blocks.append(f"[{n}]{title} ({h.kb_name}/{h.chunk.doc_id}#{h.chunk.ordinal})\n{h.chunk.text.strip()}")
    return "\n\n".join(blocks)


def extract_citations(answer: str, hits: Sequence[RetrievalHit]) -> list[tuple[str, str, int]]:
    """Map ``[n]`` markers to sources; markers without a source are dropped."""
    out: list[tuple[str, str, int]] = []
    for m in _CITATION_RE.finditer(answer):
        n = int(m.group(1))
        if 1 <= n <= len(hits):
            h = hits[n - 1]
            key = (h.kb_name, h.chunk.doc_id, h.chunk.ordinal)
            if key not in out:
                out.append(key)
    return out


def retrieve_merged(store: KnowledgeStore, kb_names: Sequence[str], query: str, k: int) -> list[RetrievalHit]:
    return merge_hits([store.retrieve(kb, query, k) for kb in kb_names])


def run_analyst(question: str, kb_names: Sequence[str], k: int, backend: LLMBackend, store: KnowledgeStore,
                prompts: PromptLibrary | None = None, retrieval_query: str | None = None) -> GroundedAnswer:
    prompts = prompts or default_library()
    hits = retrieve_merged(store, kb_names, retrieval_query or question, k)
    request = make_request(prompts.section("analyst", "system"),
                           prompts.render("analyst", "answer", context=render_sources(hits), question=question))
    answer = backend.complete(request)
    return GroundedAnswer(answer, extract_citations(answer, hits), hits, no_reference=not hits)


def run_analyst_statements(statements_text: str, backend: LLMBackend, prompts: PromptLibrary | None = None) -> str:
    prompts = prompts or default_library()
    return backend.complete(make_request(prompts.section("analyst", "system"),
                                         prompts.render("analyst", "statements", statements=statements_text)))


def run_accountant(question: str, backend: LLMBackend, registry: ToolRegistry | None = None,
                   prompts: PromptLibrary | None = None) -> GenerationResult:
    prompts = prompts or default_library()
    request = make_request(prompts.section("accountant", "system"),
                           prompts.render("accountant", "user", question=question))
    return run_tool_augmented_generation(backend, request, registry)


@dataclass
class ContextBlock:
    label: str
    text: str


def truncate_context(blocks: Sequence[ContextBlock], budget_tokens: int = DEFAULT_CONTEXT_BUDGET) -> list[ContextBlock]:
    """Trim from the front of the oldest blocks until the total fits the budget."""
    budget_chars = int(budget_tokens * CHARS_PER_TOKEN)
    out = [ContextBlock(b.label, b.text) for b in blocks]
    excess = sum(len(b.text) for b in out) - budget_chars
    for b in out:
        if excess <= 0:
            break
        cut = min(excess, len(b.text))
        b.text = TRUNCATION_MARKER + b.text[cut:]
        excess -= cut
    return out


def render_context(blocks: Sequence[ContextBlock]) -> str:
    if not blocks:
        return ""
    parts = ["上游分析结果："]
    parts += [f"### {b.label}\n{b.text.strip()}" for b in blocks]
    return "\n\n".join(parts) + "\n"


def build_consultant_request(question: str, context_blocks: Sequence[ContextBlock], prompts: PromptLibrary,
                             task: str = "consultant.answer",
                             budget_tokens: int = DEFAULT_CONTEXT_BUDGET) -> ChatRequest:
    blocks = truncate_context(context_blocks, budget_tokens)
    return make_request(prompts.section("consultant", "system"),
                        prompts.render("consultant", "user", task=task, context=render_context(blocks),
                                       question=question))


def run_consultant(question: str, context_blocks: Sequence[ContextBlock | tuple[str, str]], backend: LLMBackend,
                   prompts: PromptLibrary | None = None, task: str = "consultant.answer",
                   budget_tokens: int = DEFAULT_CONTEXT_BUDGET) -> str:
    prompts = prompts or default_library()
    blocks = [b if isinstance(b, ContextBlock) else ContextBlock(*b) for b in context_blocks]
    return backend.complete(build_consultant_request(question, blocks, prompts, task, budget_tokens))

