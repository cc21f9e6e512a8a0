"""Training-record construction: chain-of-retrieval Q&A, self-instruct with tool
commands, and self-chat dialogues."""

from __future__ import annotations

import json
import logging
import random
import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

from .agents import parse_json_object, render_sources, retrieve_merged
from .knowledge_store import KnowledgeStore, UnknownKnowledgeBase
from .llm_backend import LLMBackend, make_request
from .mathtools import format_number
from .templates import PromptLibrary, default_library
from .tool_protocol import ToolCall, ToolRegistry, execute_call, iter_closed_commands, open_headers

log = logging.getLogger(__name__)

DEFAULT_END_TOKEN = "<END>"
DEFAULT_ACCEPTANCE_FLOOR = 0.2
FEW_SHOT_K = 3


class Procedure(str, Enum):
    COR = "CoR"
    SELF_INSTRUCT = "SelfInstruct"
    SELF_CHAT = "SelfChat"
    REPORT_ANNOTATION = "ReportAnnotation"


class DataGenError(RuntimeError):
    def __init__(self, message: str, step: str | None = None):
        super().__init__(message if step is None else f"[{step}] {message}")
        self.step = step


class AcceptanceFloorError(DataGenError):
    def __init__(self, result: "ExpansionResult", floor: float):
        breakdown = ", ".join(f"{k}={v}" for k, v in sorted(result.reasons.items())) or "none"
        super().__init__(f"acceptance rate {result.acceptance_rate:.2f} below floor {floor:.2f} "
                         f"(rejections: {breakdown})", step="validate")
        self.result = result
        self.floor = floor


def model_name(backend: LLMBackend) -> str:
    return str(getattr(backend, "model_name", None) or getattr(backend, "model", None) or type(backend).__name__)


@dataclass
class Provenance:
    procedure: Procedure
    seed_id: str
    generator_model: str
    rng_seed: int | None = None
    exemplar_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.procedure = Procedure(self.procedure)
        if not self.seed_id or not self.generator_model:
            raise ValueError("provenance needs a seed_id and a generator_model")

    def to_dict(self) -> dict:
        return {"procedure": self.procedure.value, "seed_id": self.seed_id, "generator_model": self.generator_model,
                "rng_seed": self.rng_seed, "exemplar_ids": list(self.exemplar_ids)}


@dataclass
class InstructionRecord:
    instruction: str
    input: str
    output: str
    provenance: Provenance
    flags: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.instruction.strip():
            raise ValueError("instruction must be non-empty")

    def to_dict(self) -> dict:
        return {"instruction": self.instruction, "input": self.input, "output": self.output,
                "provenance": self.provenance.to_dict(), "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionRecord":
        return cls(d["instruction"], d.get("input", ""), d["output"], Provenance(**d["provenance"]),
                   list(d.get("flags", [])))


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str


@dataclass
class DialogueRecord:
    turns: list[Turn]
    topic_seed: str
    provenance: Provenance | None = None

    def __post_init__(self) -> None:
        if len(self.turns) < 2:
            raise ValueError("a dialogue needs at least two turns")
        for i, t in enumerate(self.turns):
            expected = "user" if i % 2 == 0 else "assistant"
            if t.speaker != expected:
                raise ValueError(f"turn {i} must be spoken by {expected}")

    def to_dict(self) -> dict:
        return {"turns": [{"speaker": t.speaker, "text": t.text} for t in self.turns], "topic_seed": self.topic_seed,
                "provenance": self.provenance.to_dict() if self.provenance else None}

    @classmethod
    def from_dict(cls, d: dict) -> "DialogueRecord":
        prov = Provenance(**d["provenance"]) if d.get("provenance") else None
        return cls([Turn(t["speaker"], t["text"]) for t in d["turns"]], d["topic_seed"], prov)


def record_from_dict(d: dict) -> InstructionRecord | DialogueRecord:
    return DialogueRecord.from_dict(d) if "turns" in d else InstructionRecord.from_dict(d)


class JsonlAppender:
    """Serializes appends from any number of producers into one JSONL file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, record: InstructionRecord | DialogueRecord) -> None:
        line = json.dumps(record.to_dict(), ensure_ascii=False)
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def read_jsonl(path: str | Path) -> list[InstructionRecord | DialogueRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(record_from_dict(json.loads(line)))
    return out


def produced_seed_ids(path: str | Path) -> set[str]:
    return {r.provenance.seed_id for r in read_jsonl(path) if r.provenance is not None}


def cor_generate(context_doc: str, kb_names: Sequence[str], backend: LLMBackend, store: KnowledgeStore,
                 k: int = 3, prompts: PromptLibrary | None = None, seed_id: str = "cor-0") -> InstructionRecord:
    """Question from the context, retrieval of references, answer from both."""
    if not context_doc.strip():
        raise ValueError("context document must be non-empty")
    missing = [kb for kb in kb_names if not store.has_kb(kb)]
    if missing:
        raise UnknownKnowledgeBase(", ".join(missing))
    prompts = prompts or default_library()
    system = prompts.section("datagen", "system")
    try:
        question = backend.complete(make_request(system, prompts.render("datagen", "cor_question",
                                                                        context=context_doc))).strip()
    except Exception as exc:
        raise DataGenError(str(exc), step="question") from exc
    if not question:
        raise DataGenError("backend produced an empty question", step="question")
    try:
        hits = retrieve_merged(store, kb_names, question, k)
    except Exception as exc:
        raise DataGenError(str(exc), step="retrieval") from exc
    references = render_sources(hits)
    try:
        answer = backend.complete(make_request(system, prompts.render("datagen", "cor_answer", question=question,
                                                                      references=references)))
    except Exception as exc:
        raise DataGenError(str(exc), step="answer") from exc
    flags = [] if hits else ["no-reference"]
    return InstructionRecord(question, references, answer.strip(),
                             Provenance(Procedure.COR, seed_id, model_name(backend)), flags)


def _canonical(text: str) -> str:
    s = text.strip()
    try:
        return format_number(float(s))
    except ValueError:
        return s


def validate_tool_commands(text: str, registry: ToolRegistry | None = None) -> list[str]:
    """Reasons the embedded commands fail re-execution; empty when all agree."""
    problems = []
    for cmd in iter_closed_commands(text):
        call = ToolCall(cmd.tool_name, cmd.args_raw, (0, 0))
        recomputed = execute_call(call, registry).rendered
        if _canonical(cmd.result) != _canonical(recomputed):
            problems.append(f"mismatch: [{cmd.tool_name}({cmd.args_raw})] embeds {cmd.result.strip()!r}, "
                            f"recomputed {recomputed!r}")
    if open_headers(text):
        problems.append("unclosed-command")
    return problems


@dataclass
class ExpansionResult:
    records: list[InstructionRecord]
    attempts: int
    rejected: int
    reasons: Counter = field(default_factory=Counter)
    messages: list[str] = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return len(self.records) / self.attempts if self.attempts else 1.0


def render_exemplars(exemplars: Sequence[InstructionRecord]) -> str:
    blocks = []
    for j, ex in enumerate(exemplars, 1):
        lines = [f"示例{j}：", f"题目：{ex.instruction}"]
        if ex.input:
            lines.append(f"背景：{ex.input}")
        lines.append(f"解答：{ex.output}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def self_instruct_expand(seed_pool: Sequence[InstructionRecord], n: int, backend: LLMBackend,
                         prompts: PromptLibrary | None = None, rng_seed: int = 0,
                         acceptance_floor: float = DEFAULT_ACCEPTANCE_FLOOR,
                         registry: ToolRegistry | None = None, skip_ids: Iterable[str] = (),
                         appender: JsonlAppender | None = None) -> ExpansionResult:
    """Make ``n`` generation attempts, keeping only replies whose tool commands re-execute to the embedded values."""
    if len(seed_pool) < FEW_SHOT_K:
        raise ValueError(f"self-instruct needs at least {FEW_SHOT_K} seed records")
    if n < 0:
        raise ValueError("n must be non-negative")
    prompts = prompts or default_library()
    system = prompts.section("datagen", "system")
    rng = random.Random(rng_seed)
    skip = set(skip_ids)
    result = ExpansionResult([], 0, 0)
    for i in range(n):
        # Sample even for skipped ids so a resumed run sees the same exemplars.
        exemplars = rng.sample(list(seed_pool), FEW_SHOT_K)
        seed_id = f"selfinstruct-{rng_seed}-{i}"
        if seed_id in skip:
            continue
        result.attempts += 1
        reply = backend.complete(make_request(system, prompts.render("datagen", "self_instruct",
                                                                     exemplars=render_exemplars(exemplars))))
        try:
            obj = parse_json_object(reply)
            instruction, output = str(obj["instruction"]).strip(), str(obj["output"]).strip()
            extra = str(obj.get("input") or "").strip()
        except (ValueError, KeyError, TypeError):
            result.rejected += 1
            result.reasons["unparseable"] += 1
            continue
        if not instruction or not output:
            result.rejected += 1
            result.reasons["missing-field"] += 1
            continue
        problems = validate_tool_commands(output, registry) + validate_tool_commands(extra, registry)
        if problems:
            result.rejected += 1
            result.reasons["unclosed-command" if problems[0] == "unclosed-command" else "mismatch"] += 1
            result.messages.extend(problems)
            continue
        prov = Provenance(Procedure.SELF_INSTRUCT, seed_id, model_name(backend), rng_seed,
                          [ex.provenance.seed_id for ex in exemplars])
        record = InstructionRecord(instruction, extra, output, prov)
        result.records.append(record)
        if appender is not None:
            appender.append(record)
    if result.attempts and result.acceptance_rate < acceptance_floor:
        raise AcceptanceFloorError(result, acceptance_floor)
    return result


def _history(turns: Sequence[Turn]) -> str:
    if not turns:
        return "（尚无对话）"
    return "\n".join(f"{'用户' if t.speaker == 'user' else '顾问'}：{t.text}" for t in turns)


def self_chat_dialogue(topic_seed: str, turns: int, backend: LLMBackend, prompts: PromptLibrary | None = None,
                       end_token: str = DEFAULT_END_TOKEN, seed_id: str = "selfchat-0") -> DialogueRecord:
    if turns < 2 or turns % 2:
        raise ValueError("turns must be an even number of at least 2")
    prompts = prompts or default_library()
    system = prompts.section("datagen", "system")
    history: list[Turn] = []
    for t in range(turns):
        if t % 2 == 0:
            user = prompts.render("datagen", "selfchat_user", topic=topic_seed, history=_history(history),
                                  end_token=end_token)
            reply = backend.complete(make_request(system, user)).strip()
            if end_token in reply:
                break
            history.append(Turn("user", reply))
        else:
            user = prompts.render("datagen", "selfchat_assistant", topic=topic_seed, history=_history(history))
            history.append(Turn("assistant", backend.complete(make_request(system, user)).strip()))
    if len(history) < 2:
        raise DataGenError("user simulator ended the dialogue before the first exchange", step="selfchat")
    return DialogueRecord(history, topic_seed, Provenance(Procedure.SELF_CHAT, seed_id, model_name(backend)))


@dataclass
class Seed:
    seed_id: str
    text: str
    record: InstructionRecord | None = None


def load_seeds(path: str | Path) -> list[Seed]:
    """Seeds file: JSONL with ``seed_id``/``id`` plus ``text`` or a full instruction record; plain text lines also work."""
    seeds = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            obj: Any = json.loads(line)
        except json.JSONDecodeError:
            obj = line
        if isinstance(obj, str):
            seeds.append(Seed(f"seed-{n}", obj))
            continue
        sid = str(obj.get("seed_id") or obj.get("id") or (obj.get("provenance") or {}).get("seed_id") or f"seed-{n}")
        record = None
        if "instruction" in obj and "output" in obj:
            prov = obj.get("provenance") or {"procedure": Procedure.SELF_INSTRUCT, "seed_id": sid,
                                               "generator_model": "human"}
            record = InstructionRecord(obj["instruction"], obj.get("input", ""), obj["output"], Provenance(**prov))
        seeds.append(Seed(sid, str(obj.get("text") or obj.get("topic") or obj.get("instruction") or ""), record))
    return seeds


def run_cor(seeds: Sequence[Seed], out: str | Path, n: int, backend: LLMBackend, store: KnowledgeStore,
            kb_names: Sequence[str], k: int = 3, prompts: PromptLibrary | None = None) -> int:
    """Generate up to ``n`` CoR records, skipping seeds already present in ``out``."""
    done = produced_seed_ids(out)
    appender = JsonlAppender(out)
    made = 0
    for seed in seeds:
        if made >= n:
            break
        if seed.seed_id in done:
            continue
        appender.append(cor_generate(seed.text, kb_names, backend, store, k, prompts, seed_id=seed.seed_id))
        made += 1
    return made


def run_selfchat(seeds: Sequence[Seed], out: str | Path, n: int, backend: LLMBackend, turns: int = 4,
                 prompts: PromptLibrary | None = None, end_token: str = DEFAULT_END_TOKEN) -> int:
    done = produced_seed_ids(out)
    appender = JsonlAppender(out)
    made = 0
    for seed in seeds:
        if made >= n:
            break
        if seed.seed_id in done:
            continue
        appender.append(self_chat_dialogue(seed.text, turns, backend, prompts, end_token, seed_id=seed.seed_id))
        made += 1
    return made


def run_selfinstruct(seeds: Sequence[Seed], out: str | Path, n: int, backend: LLMBackend,
                     prompts: PromptLibrary | None = None, rng_seed: int = 0,
                     acceptance_floor: float = DEFAULT_ACCEPTANCE_FLOOR) -> ExpansionResult:
    pool = [s.record for s in seeds if s.record is not None]
    return self_instruct_expand(pool, n, backend, prompts, rng_seed, acceptance_floor,
                                skip_ids=produced_seed_ids(out), appender=JsonlAppender(out))
