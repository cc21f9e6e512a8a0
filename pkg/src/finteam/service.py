"""JSON-over-HTTP service: ``POST /v1/analyze``, ``GET /v1/trace/{id}``, ``GET /health``."""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable

from .config import EngineConfig, build_backend, build_prompts, build_registry, build_store
from .fin_ratios import StatementValidationError
from .knowledge_store import KnowledgeStore
from .llm_backend import LLMBackend
from .templates import PromptLibrary
from .tool_protocol import ToolRegistry
from .workflows import WorkflowDeps, WorkflowError, load_trace, parse_scenario, run_scenario, save_trace

log = logging.getLogger(__name__)

DEFAULT_MAX_CONCURRENCY = 16
MAX_BODY_BYTES = 4 * 1024 * 1024


class ApiError(Exception):
    def __init__(self, status: int, message: str, step: str | None = None, **extra: Any):
        super().__init__(message)
        self.status = status
        self.body = {"error": message, "step": step, **extra}


@dataclass
class ServiceState:
    backend_factory: Callable[[], LLMBackend]
    store: KnowledgeStore
    runs_dir: Path
    prompts: PromptLibrary
    registry: ToolRegistry
    context_budget: int = 3000
    max_concurrency: int = DEFAULT_MAX_CONCURRENCY
    token: str | None = None

    def __post_init__(self) -> None:
        self.runs_dir = Path(self.runs_dir)
        self.slots = threading.BoundedSemaphore(self.max_concurrency)

    def deps(self) -> WorkflowDeps:
        return WorkflowDeps(self.backend_factory(), self.store, self.registry, self.prompts,
                            context_budget=self.context_budget)

    def analyze(self, body: Any) -> dict:
        if not isinstance(body, dict):
            raise ApiError(400, "request body must be a JSON object")
        try:
            scenario = parse_scenario(str(body.get("scenario", "")))
        except ValueError as exc:
            raise ApiError(400, str(exc), step="route") from None
        query = body.get("query", "")
        options = body.get("options") or {}
        if not isinstance(query, str) or not isinstance(options, dict):
            raise ApiError(400, "query must be a string and options an object")
        if scenario.value != "statements" and not query.strip():
            raise ApiError(400, "query must be non-empty")
        try:
            trace = run_scenario(scenario, query, self.deps(), options, body.get("statements"))
        except StatementValidationError as exc:
            raise ApiError(422, str(exc), step="validate", violations=exc.violations) from None
        except WorkflowError as exc:
            path = save_trace(exc.trace, self.runs_dir)
            raise ApiError(500, str(exc), step=exc.step, trace_id=path.stem) from None
        save_trace(trace, self.runs_dir)
        return {"report": trace.final_report, "trace_id": trace.trace_id, "scenario": scenario.value}

    def trace(self, trace_id: str) -> dict:
        try:
            return load_trace(self.runs_dir, trace_id).to_dict()
        except (FileNotFoundError, OSError):
            raise ApiError(404, f"no trace {trace_id}") from None


class _Handler(BaseHTTPRequestHandler):
    server: "FinTeamServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt: str, *args: Any) -> None:
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, payload: dict) -> None:
        data = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _authorized(self) -> bool:
        token = self.server.state.token
        return not token or self.headers.get("Authorization") == f"Bearer {token}"

    def _dispatch(self, fn: Callable[[], dict]) -> None:
        state = self.server.state
        if not self._authorized():
            self._send(401, {"error": "unauthorized", "step": None})
            return
        if not state.slots.acquire(timeout=30):
            self._send(503, {"error": "too many concurrent requests", "step": None})
            return
        try:
            self._send(200, fn())
        except ApiError as exc:
            self._send(exc.status, exc.body)
        except Exception as exc:  # keep the connection contract: always JSON
            log.exception("unhandled error")
            self._send(500, {"error": str(exc), "step": None})
        finally:
            state.slots.release()

    def do_GET(self) -> None:
        path = self.path.split("?", 1)[0]
        if path == "/health":
            self._send(200, {"status": "ok"})
        elif path.startswith("/v1/trace/"):
            trace_id = path[len("/v1/trace/"):]
            self._dispatch(lambda: self.server.state.trace(trace_id))
        else:
            self._send(404, {"error": f"no route {path}", "step": None})

    def do_POST(self) -> None:
        path = self.path.split("?", 1)[0]
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY_BYTES:
            self._send(413, {"error": "request body too large", "step": None})
            return
        raw = self.rfile.read(length)
        if path != "/v1/analyze":
            self._send(404, {"error": f"no route {path}", "step": None})
            return
        try:
            body = json.loads(raw or b"null")
        except json.JSONDecodeError as exc:
            self._send(400, {"error": f"invalid JSON: {exc}", "step": None})
            return
        self._dispatch(lambda: self.server.state.analyze(body))


class FinTeamServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], state: ServiceState):
        super().__init__(address, _Handler)
        self.state = state

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05}, name="finteam-http",
                                  daemon=True)
        thread.start()
        return thread


def state_from_config(cfg: EngineConfig) -> ServiceState:
    token = os.environ.get(cfg.service.token_env) if cfg.service.token_env else None
    return ServiceState(lambda: build_backend(cfg), build_store(cfg), cfg.runs_dir, build_prompts(cfg),
                        build_registry(cfg), cfg.limits.context_budget, cfg.service.max_concurrency, token)


def make_server(cfg: EngineConfig, host: str | None = None, port: int | None = None) -> FinTeamServer:
    """Bind the service; raises OSError when the port is unavailable."""
    address = (host or cfg.service.host, cfg.service.port if port is None else port)
    return FinTeamServer(address, state_from_config(cfg))


def serve(cfg: EngineConfig, host: str | None = None, port: int | None = None) -> None:
    server = make_server(cfg, host, port)
    log.info("serving on %s", server.url)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
