"""Inline tool commands of the form ``[Calculator(expression)→result]``.

The generation loop streams from a backend, halts as soon as a complete
command header ``[Name(args)→`` appears, runs the tool, splices
``result]`` after the arrow and asks the backend to continue.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Callable, Iterator, Union

from .llm_backend import ChatMessage, ChatRequest, LLMBackend
from .mathtools import (
    MathError,
    count_samples,
    eval_expression,
    format_assignment,
    format_number,
    normal_cdf,
    parse_samples,
    solve_equation_system,
)

log = logging.getLogger(__name__)

TOOL_NAMES = ("Calculator", "EquationSolver", "Counter", "ProbabilityTable")
ARROW = "→"
ASCII_ARROW = "->"
CONTINUE_INSTRUCTION = "continue from where you stopped"

DEFAULT_MAX_CALLS = 8
DEFAULT_TIMEOUT = 1.0

_HEADER_START = re.compile(r"\[(" + "|".join(TOOL_NAMES) + r")\(")
# Result text of a closed command: no brackets, no line breaks.
_CLOSURE = re.compile(r"[^\[\]\n]*\]")

ToolValue = Union[float, int, dict]


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    args_raw: str
    span: tuple[int, int]  # UTF-8 byte range of "[Name(args)→"
    char_span: tuple[int, int] = (0, 0)

    @property
    def header(self) -> str:
        return f"[{self.tool_name}({self.args_raw}){ARROW}"

    def to_dict(self) -> dict:
        return {"tool_name": self.tool_name, "args_raw": self.args_raw,
                "span": list(self.span), "char_span": list(self.char_span)}


@dataclass(frozen=True)
class ToolResult:
    rendered: str
    value: ToolValue | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if (self.value is None) == (self.error is None):
            raise ValueError("exactly one of value and error must be set")

    def to_dict(self) -> dict:
        return {"rendered": self.rendered, "value": self.value, "error": self.error}


ToolFn = Callable[[str], tuple[ToolValue, str]]


def _calculator(args: str) -> tuple[ToolValue, str]:
    value = eval_expression(args)
    return value, format_number(value)


def _equation_solver(args: str) -> tuple[ToolValue, str]:
    solution = solve_equation_system(args)
    return solution, format_assignment(solution)


def _counter(args: str) -> tuple[ToolValue, str]:
    n = count_samples(parse_samples(args))
    return n, str(n)


def _probability_table(args: str) -> tuple[ToolValue, str]:
    value = normal_cdf(eval_expression(args))
    return value, format_number(value)


_DEFAULT_TOOLS: dict[str, ToolFn] = {
    "Calculator": _calculator,
    "EquationSolver": _equation_solver,
    "Counter": _counter,
    "ProbabilityTable": _probability_table,
}

_executor = ThreadPoolExecutor(max_workers=4, thread_name_prefix="tool")


@dataclass
class ToolRegistry:
    tools: dict[str, ToolFn] = field(default_factory=lambda: dict(_DEFAULT_TOOLS))
    timeout: float = DEFAULT_TIMEOUT
    max_calls_per_response: int = DEFAULT_MAX_CALLS

    def __post_init__(self) -> None:
        if self.max_calls_per_response < 1:
            raise ValueError("max_calls_per_response must be positive")


def _byte_span(text: str, start: int, end: int) -> tuple[int, int]:
    b0 = len(text[:start].encode("utf-8"))
    return b0, b0 + len(text[start:end].encode("utf-8"))


@dataclass(frozen=True)
class _Header:
    name: str
    args: str
    start: int
    end: int  # just past the arrow


def _scan_from(text: str, pos: int) -> tuple[_Header | None, bool]:
    """Find the first complete header starting at or after ``pos``.

    Returns ``(header, pending)``; ``pending`` is True when scanning stopped at
    an incomplete header that may still complete as more text streams in.
    """
    while True:
        m = _HEADER_START.search(text, pos)
        if m is None:
            return None, False
        depth = 1
        i = m.end()
        args_start = i
        malformed = False
        while i < len(text) and depth:
            ch = text[i]
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
            elif ch == "[" and _HEADER_START.match(text, i):
                malformed = True  # nested command header
                break
            i += 1
        if malformed:
            pos = m.start() + 1
            continue
        if depth:
            return None, True
        args = text[args_start:i - 1]
        rest = text[i:i + 2]
        if rest.startswith(ARROW):
            return _Header(m.group(1), args, m.start(), i + 1), False
        if rest == ASCII_ARROW:
            return _Header(m.group(1), args, m.start(), i + 2), False
        if rest in ("", "-"):
            return None, True
        pos = m.start() + 1


def _is_closed(text: str, header: _Header) -> bool:
    return _CLOSURE.match(text, header.end) is not None


def _to_call(text: str, h: _Header) -> ToolCall:
    return ToolCall(h.name, h.args, _byte_span(text, h.start, h.end), (h.start, h.end))


def detect_call(generated_prefix: str) -> ToolCall | None:
    """Earliest complete header in ``generated_prefix`` still awaiting its result."""
    pos = 0
    while True:
        h, _ = _scan_from(generated_prefix, pos)
        if h is None:
            return None
        if not _is_closed(generated_prefix, h):
            return _to_call(generated_prefix, h)
        pos = h.end


@dataclass(frozen=True)
class ClosedCommand:
    tool_name: str
    args_raw: str
    result: str
    start: int
    end: int  # just past "]"


def iter_closed_commands(text: str) -> Iterator[ClosedCommand]:
    pos = 0
    while True:
        h, _ = _scan_from(text, pos)
        if h is None:
            return
        m = _CLOSURE.match(text, h.end)
        if m is None:
            pos = h.end
            continue
        yield ClosedCommand(h.name, h.args, text[h.end:m.end() - 1], h.start, m.end())
        pos = m.end()


def open_headers(text: str) -> list[ToolCall]:
    """Every complete header in ``text`` not followed by ``result]``."""
    found = []
    pos = 0
    while True:
        h, _ = _scan_from(text, pos)
        if h is None:
            return found
        if not _is_closed(text, h):
            found.append(_to_call(text, h))
        pos = h.end


def strip_commands(text: str) -> str:
    """Remove every closed ``[Name(args)→result]`` segment."""
    out = []
    pos = 0
    for cmd in iter_closed_commands(text):
        out.append(text[pos:cmd.start])
        pos = cmd.end
    out.append(text[pos:])
    return "".join(out)


def execute_call(call: ToolCall, registry: ToolRegistry | None = None) -> ToolResult:
    registry = registry or ToolRegistry()
    fn = registry.tools.get(call.tool_name)
    if fn is None:
        return ToolResult(rendered="ERROR: unknown-tool", error="unknown-tool")
    future = _executor.submit(fn, call.args_raw)
    try:
        value, rendered = future.result(timeout=registry.timeout)
    except FutureTimeout:
        future.cancel()
        return ToolResult(rendered="ERROR: timeout", error="timeout")
    except MathError as exc:
        return ToolResult(rendered=f"ERROR: {exc.kind}", error=exc.kind)
    except (ValueError, ArithmeticError) as exc:
        log.debug("tool %s failed on %r: %s", call.tool_name, call.args_raw, exc)
        return ToolResult(rendered="ERROR: invalid-input", error="invalid-input")
    return ToolResult(rendered=rendered, value=value)


@dataclass
class GenerationResult:
    final_text: str
    calls: list[tuple[ToolCall, ToolResult]]
    budget_exceeded: bool = False

    def __iter__(self):
        # Unpacks as (final_text, calls).
        return iter((self.final_text, self.calls))


def continuation_request(request: ChatRequest, prefix: str) -> ChatRequest:
    return request.extended(ChatMessage("assistant", prefix), ChatMessage("user", CONTINUE_INSTRUCTION))


def run_tool_augmented_generation(backend: LLMBackend, request: ChatRequest,
                                  registry: ToolRegistry | None = None) -> GenerationResult:
    registry = registry or ToolRegistry()
    text = ""
    calls: list[tuple[ToolCall, ToolResult]] = []
    current = request
    while True:
        base = text
        scan_pos = len(base)
        received: list[str] = []

        def on_delta(delta: str) -> bool:
            received.append(delta)
            header, _ = _scan_from(base + "".join(received), scan_pos)
            return header is not None

        reply = backend.complete_streaming(current, on_delta)
        text = base + reply
        header, _ = _scan_from(text, scan_pos)
        if header is None:
            return GenerationResult(text, calls)
        if len(calls) >= registry.max_calls_per_response:
            log.info("tool call budget of %d exhausted", registry.max_calls_per_response)
            return GenerationResult(text[:header.start], calls, budget_exceeded=True)
        # Anything the model produced past the arrow is discarded: decoding halts there.
        text = text[:header.start] + f"[{header.name}({header.args}){ARROW}"
        call = ToolCall(header.name, header.args, _byte_span(text, header.start, len(text)),
                        (header.start, len(text)))
        result = execute_call(call, registry)
        calls.append((call, result))
        text += result.rendered + "]"
        current = continuation_request(request, text)


def split_generation(generation: str) -> list[str]:
    """Cut a tool-bearing generation into the segments a model would stream.

    Each segment but the last ends right after a header arrow; any result the
    generation already carries for that command is dropped, as the protocol
    overwrites it. Useful for building scripted backends.
    """
    segments = []
    pos = 0
    cursor = 0
    while True:
        h, _ = _scan_from(generation, cursor)
        if h is None:
            segments.append(generation[pos:])
            return segments
        segments.append(generation[pos:h.end])
        m = _CLOSURE.match(generation, h.end)
        pos = m.end() if m else h.end
        cursor = pos
