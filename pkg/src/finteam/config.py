"""TOML engine configuration with ``${ENV}`` interpolation."""

from __future__ import annotations

import logging
import os
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .knowledge_store import FallbackEmbedder, KnowledgeStore, RemoteEmbedder
from .llm_backend import LLMBackend, RemoteBackend, ScriptedBackend
from .templates import PromptLibrary
from .tool_protocol import ToolRegistry

log = logging.getLogger(__name__)

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
_LINE_RE = re.compile(r"line (\d+)")


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: int | None):
        super().__init__(message)
        self.line = line


class ConfigValidationError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid config: " + "; ".join(errors))
        self.errors = errors


@dataclass
class BackendConfig:
    base_url: str = ""
    model: str = ""
    api_key_env: str = "FINTEAM_API_KEY"
    script: str | None = None  # scripted replies file, for offline runs


@dataclass
class EmbeddingConfig:
    mode: str = "fallback"
    base_url: str | None = None
    model: str = "m3e-base"


@dataclass
class LimitsConfig:
    max_calls_per_response: int = 8
    retries: int = 2
    context_budget: int = 3000


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    max_concurrency: int = 16
    token_env: str | None = None


@dataclass
class EngineConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    data_dir: Path = Path("data/kb")
    prompts_dir: Path | None = None
    runs_dir: Path = Path("runs")
    limits: LimitsConfig = field(default_factory=LimitsConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)


_SCHEMA: dict[str, set[str]] = {
    "backend": {"base_url", "model", "api_key_env", "script"},
    "embedding": {"mode", "base_url", "model"},
    "kb": {"data_dir"},
    "limits": {"max_calls_per_response", "retries", "context_budget"},
    "service": {"host", "port", "max_concurrency", "token_env"},
}
_TOP_LEVEL = {"prompts_dir", "runs_dir", "data_dir"}


def _interpolate(value: Any, errors: list[str], where: str) -> Any:
    if isinstance(value, str):
        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name not in os.environ:
                errors.append(f"{where}: environment variable {name} is not set")
                return ""
            return os.environ[name]
        return _ENV_RE.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v, errors, f"{where}.{k}" if where else k) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v, errors, where) for v in value]
    return value


def parse_config(text: str, base_dir: Path | None = None) -> EngineConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = _LINE_RE.search(str(exc))
        line = int(m.group(1)) if m else None
        raise ConfigParseError(f"config parse error{f' at line {line}' if line else ''}: {exc}", line) from exc
    errors: list[str] = []
    raw = _interpolate(raw, errors, "")
    for key, value in raw.items():
        if key in _SCHEMA and isinstance(value, dict):
            for sub in value:
                if sub not in _SCHEMA[key]:
                    warnings.warn(f"unknown config key {key}.{sub}", stacklevel=2)
        elif key not in _TOP_LEVEL and key not in _SCHEMA:
            warnings.warn(f"unknown config key {key}", stacklevel=2)

    def table(name: str) -> dict:
        v = raw.get(name, {})
        if not isinstance(v, dict):
            errors.append(f"{name} must be a table")
            return {}
        return {k: v[k] for k in v if k in _SCHEMA[name]}

    base_dir = base_dir or Path.cwd()

    def path(value: Any, name: str) -> Path:
        if not isinstance(value, str):
            errors.append(f"{name} must be a string path")
            return base_dir
        p = Path(value).expanduser()
        return p if p.is_absolute() else base_dir / p

    cfg = EngineConfig()
    try:
        cfg.backend = BackendConfig(**table("backend"))
        cfg.embedding = EmbeddingConfig(**table("embedding"))
        cfg.limits = LimitsConfig(**table("limits"))
        cfg.service = ServiceConfig(**table("service"))
    except TypeError as exc:
        errors.append(str(exc))
    kb = table("kb")
    cfg.data_dir = path(kb.get("data_dir", raw.get("data_dir", "data/kb")), "kb.data_dir")
    cfg.runs_dir = path(raw.get("runs_dir", "runs"), "runs_dir")
    if raw.get("prompts_dir") is not None:
        cfg.prompts_dir = path(raw["prompts_dir"], "prompts_dir")
    if cfg.backend.script is not None:
        cfg.backend.script = str(path(cfg.backend.script, "backend.script"))
    errors += validate_config(cfg)
    if errors:
        raise ConfigValidationError(errors)
    return cfg


def validate_config(cfg: EngineConfig) -> list[str]:
    errors = []
    b = cfg.backend
    if b.script is None:
        if not b.base_url:
            errors.append("backend.base_url is required")
        if not b.model:
            errors.append("backend.model is required")
    elif not Path(b.script).is_file():
        errors.append(f"backend.script {b.script} does not exist")
    if cfg.embedding.mode not in ("remote", "fallback"):
        errors.append(f"embedding.mode must be remote or fallback, got {cfg.embedding.mode!r}")
    elif cfg.embedding.mode == "remote" and not cfg.embedding.base_url:
        errors.append("embedding.mode remote requires embedding.base_url")
    for name in ("max_calls_per_response", "context_budget"):
        v = getattr(cfg.limits, name)
        if not isinstance(v, int) or v < 1:
            errors.append(f"limits.{name} must be a positive integer")
    if not isinstance(cfg.limits.retries, int) or cfg.limits.retries < 0:
        errors.append("limits.retries must be a non-negative integer")
    if not isinstance(cfg.service.max_concurrency, int) or cfg.service.max_concurrency < 1:
        errors.append("service.max_concurrency must be a positive integer")
    for name, d in (("kb.data_dir", cfg.data_dir), ("runs_dir", cfg.runs_dir)):
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            errors.append(f"{name} {d} cannot be created: {exc}")
    if cfg.prompts_dir is not None and not cfg.prompts_dir.is_dir():
        errors.append(f"prompts_dir {cfg.prompts_dir} does not exist")
    return errors


def load_config(path: str | Path) -> EngineConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    return parse_config(path.read_text(encoding="utf-8"), path.resolve().parent)


def build_backend(cfg: EngineConfig) -> LLMBackend:
    if cfg.backend.script:
        return ScriptedBackend.from_file(cfg.backend.script)
    return RemoteBackend(cfg.backend.base_url, cfg.backend.model, api_key_env=cfg.backend.api_key_env,
                         retries=cfg.limits.retries)


def build_store(cfg: EngineConfig) -> KnowledgeStore:
    if cfg.embedding.mode == "remote":
        embedder = RemoteEmbedder(cfg.embedding.base_url, cfg.embedding.model, api_key_env=cfg.backend.api_key_env)
    else:
        embedder = FallbackEmbedder()
    return KnowledgeStore(cfg.data_dir, embedder)


def build_prompts(cfg: EngineConfig) -> PromptLibrary:
    return PromptLibrary(cfg.prompts_dir)


def build_registry(cfg: EngineConfig) -> ToolRegistry:
    return ToolRegistry(max_calls_per_response=cfg.limits.max_calls_per_response)
