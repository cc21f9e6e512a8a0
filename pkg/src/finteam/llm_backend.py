"""Chat-completion backends: an OpenAI-compatible HTTP client and a scripted fake."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import httpx

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")

DEFAULT_AGENT_TEMPERATURE = 0.1
DEFAULT_JUDGE_TEMPERATURE = 0.0

# on_delta returns True to stop the stream early.
DeltaCallback = Callable[[str], Optional[bool]]


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    """Network failure or retryable HTTP status that persisted past all retries."""

    def __init__(self, message: str, attempts: int, status: int | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.status = status


class ResponseError(BackendError):
    """Non-retryable HTTP status or a response body that is not the expected shape."""


class ScriptError(BackendError):
    """A scripted backend ran out of entries or got a request it cannot match."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.role != "assistant" and not self.content.strip():
            raise ValueError(f"{self.role} message content must be non-empty")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = DEFAULT_AGENT_TEMPERATURE
    max_tokens: int = 2048
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message must be a system or user message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if len(self.stop_sequences) > 4:
            raise ValueError("at most 4 stop sequences")

    @property
    def last_user_message(self) -> str:
        for msg in reversed(self.messages):
            if msg.role == "user":
                return msg.content
        return ""

    def extended(self, *messages: ChatMessage) -> "ChatRequest":
        return ChatRequest(self.messages + tuple(messages), self.temperature, self.max_tokens, self.stop_sequences)


def make_request(system: str | None, user: str, **kwargs) -> ChatRequest:
    msgs = []
    if system:
        msgs.append(ChatMessage("system", system))
    msgs.append(ChatMessage("user", user))
    return ChatRequest(tuple(msgs), **kwargs)


class LLMBackend:
    """Interface shared by every backend. Instances are safe to share across threads."""

    model_name = "unknown"

    def complete(self, request: ChatRequest) -> str:
        raise NotImplementedError

    def complete_streaming(self, request: ChatRequest, on_delta: DeltaCallback) -> str:
        raise NotImplementedError


def complete(backend: LLMBackend, request: ChatRequest) -> str:
    return backend.complete(request)


def complete_streaming(backend: LLMBackend, request: ChatRequest, on_delta: DeltaCallback) -> str:
    return backend.complete_streaming(request, on_delta)


def _stop_prefix_len(text: str, stops: Sequence[str]) -> int:
    """Length of the longest suffix of ``text`` that is a proper prefix of a stop sequence."""
    best = 0
    for stop in stops:
        for n in range(min(len(stop) - 1, len(text)), best, -1):
            if text.endswith(stop[:n]):
                best = n
                break
    return best


def _truncate_at_stop(text: str, stops: Sequence[str]) -> tuple[str, bool]:
    cut = min((i for i in (text.find(s) for s in stops if s) if i >= 0), default=-1)
    return (text[:cut], True) if cut >= 0 else (text, False)


@dataclass
class ScriptEntry:
    matcher: str
    reply: str


class ScriptedBackend(LLMBackend):
    """Deterministic backend replaying canned replies.

    Strict mode consumes entries in order and the next entry must match the
    request's last user message (substring test; ``""`` matches anything).
    Lenient mode answers with the first matching entry and never consumes.
    """

    def __init__(self, script: Sequence[tuple[str, str] | ScriptEntry], strict: bool = True,
                 chunk_size: int = 4, model_name: str = "scripted"):
        self.script = [e if isinstance(e, ScriptEntry) else ScriptEntry(*e) for e in script]
        self.strict = strict
        self.chunk_size = max(1, chunk_size)
        self.model_name = model_name
        self.requests: list[ChatRequest] = []
        self._cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def from_replies(cls, replies: Sequence[str], **kwargs) -> "ScriptedBackend":
        return cls([("", r) for r in replies], strict=True, **kwargs)

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "ScriptedBackend":
        """Load ``{"strict": bool, "script": [{"match": str, "reply": str}, ...]}``."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = [ScriptEntry(e.get("match", ""), e["reply"]) for e in data["script"]]
        return cls(entries, strict=data.get("strict", False), **kwargs)

    @property
    def remaining(self) -> int:
        return len(self.script) - self._cursor

    def reset(self) -> None:
        with self._lock:
            self._cursor = 0
            self.requests.clear()

    def _next_reply(self, request: ChatRequest) -> str:
        last = request.last_user_message
        with self._lock:
            self.requests.append(request)
            if self.strict:
                if self._cursor >= len(self.script):
                    raise ScriptError(f"script exhausted after {self._cursor} replies")
                entry = self.script[self._cursor]
                if entry.matcher not in last:
                    raise ScriptError(
                        f"script entry {self._cursor} expects {entry.matcher!r} in the last user message"
                    )
                self._cursor += 1
                return entry.reply
            for entry in self.script:
                if entry.matcher in last:
                    return entry.reply
        raise ScriptError(f"no script entry matches request ending {last[-80:]!r}")

    def complete(self, request: ChatRequest) -> str:
        return self._next_reply(request)

    def complete_streaming(self, request: ChatRequest, on_delta: DeltaCallback) -> str:
        reply = self._next_reply(request)
        out = []
        for i in range(0, len(reply), self.chunk_size):
            delta = reply[i:i + self.chunk_size]
            out.append(delta)
            if on_delta(delta):
                break
        return "".join(out)


class RecordingBackend(LLMBackend):
    """Wraps a backend and records every reply in call order (for trace replay)."""

    def __init__(self, inner: LLMBackend):
        self.inner = inner
        self.model_name = inner.model_name
        self.replies: list[str] = []
        self._lock = threading.Lock()

    def _record(self, reply: str) -> str:
        with self._lock:
            self.replies.append(reply)
        return reply

    def complete(self, request: ChatRequest) -> str:
        return self._record(self.inner.complete(request))

    def complete_streaming(self, request: ChatRequest, on_delta: DeltaCallback) -> str:
        return self._record(self.inner.complete_streaming(request, on_delta))


_RETRYABLE = {429, 500, 502, 503, 504}


class RemoteBackend(LLMBackend):
    """Client for ``POST {base_url}/chat/completions`` in the OpenAI wire format."""

    def __init__(self, base_url: str, model: str, api_key_env: str = "FINTEAM_API_KEY",
                 retries: int = 2, backoff_base: float = 0.25, timeout: float = 60.0,
                 client: httpx.Client | None = None):
        self.base_url = base_url.rstrip("/")
        self.model_name = model
        self.api_key_env = api_key_env
        self.retries = retries
        self.backoff_base = backoff_base
        self._client = client or httpx.Client(timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _payload(self, request: ChatRequest, stream: bool) -> dict:
        payload = {
            "model": self.model_name,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stream": stream,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)
        return payload

    def _with_retries(self, attempt_fn):
        attempts = self.retries + 1
        last: Exception | None = None
        status = None
        for attempt in range(attempts):
            if attempt:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))
            try:
                return attempt_fn()
            except httpx.TransportError as exc:
                last, status = exc, None
            except _RetryableStatus as exc:
                last, status = exc, exc.status
            log.warning("chat request attempt %d/%d failed: %s", attempt + 1, attempts, last)
        raise TransportError(f"chat request failed after {attempts} attempts: {last}", attempts, status)

    def _check_status(self, response: httpx.Response) -> None:
        if response.status_code in _RETRYABLE:
            raise _RetryableStatus(response.status_code)
        if not 200 <= response.status_code < 300:
            raise ResponseError(f"HTTP {response.status_code}: {response.text[:200]}")

    def complete(self, request: ChatRequest) -> str:
        url = f"{self.base_url}/chat/completions"

        def attempt() -> str:
            response = self._client.post(url, json=self._payload(request, False), headers=self._headers())
            self._check_status(response)
            try:
                text = response.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ResponseError(f"malformed completion response: {exc}") from exc
            if not isinstance(text, str):
                raise ResponseError("completion content is not text")
            return text

        text = self._with_retries(attempt)
        return _truncate_at_stop(text, request.stop_sequences)[0]

    def complete_streaming(self, request: ChatRequest, on_delta: DeltaCallback) -> str:
        url = f"{self.base_url}/chat/completions"

        def attempt() -> str:
            received: list[str] = []
            with self._client.stream("POST", url, json=self._payload(request, True),
                                     headers=self._headers()) as response:
                if response.status_code != 200:
                    response.read()
                self._check_status(response)
                full = ""
                emitted = 0

                def emit(upto: int) -> bool:
                    nonlocal emitted
                    delta = full[emitted:upto]
                    if not delta:
                        return False
                    received.append(delta)
                    emitted = upto
                    return bool(on_delta(delta))

                try:
                    stopped = False
                    for piece in _iter_sse_content(response.iter_lines()):
                        full += piece
                        candidate, hit_stop = _truncate_at_stop(full, request.stop_sequences)
                        if hit_stop:
                            emit(len(candidate))
                            stopped = True
                            break
                        # Hold back a tail that might be the start of a stop sequence.
                        if emit(len(full) - _stop_prefix_len(full, request.stop_sequences)):
                            stopped = True
                            break
                    if not stopped:
                        emit(len(full))
                except httpx.TransportError as exc:
                    if not received:
                        raise
                    # Deltas already reached the caller; a retry would duplicate them.
                    raise TransportError(f"stream interrupted: {exc}", 1) from exc
            return "".join(received)

        return self._with_retries(attempt)


class _RetryableStatus(Exception):
    def __init__(self, status: int):
        super().__init__(f"HTTP {status}")
        self.status = status


def _iter_sse_content(lines: Iterator[str]) -> Iterator[str]:
    for line in lines:
        line = line.strip()
        if not line.startswith("data:"):
            continue
        data = line[5:].strip()
        if data == "[DONE]":
            return
        try:
            chunk = json.loads(data)
            delta = chunk["choices"][0].get("delta") or {}
        except (ValueError, KeyError, IndexError, TypeError, AttributeError) as exc:
            raise ResponseError(f"malformed stream chunk: {data[:120]!r}") from exc
        content = delta.get("content")
        if content:
            yield content
