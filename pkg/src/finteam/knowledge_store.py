"""Named knowledge bases of embedded chunks with exact cosine top-k retrieval."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import httpx
import numpy as np

from .text import token_spans, tokenize

log = logging.getLogger(__name__)

FALLBACK_DIM = 256
DEFAULT_CHUNK_TOKENS = 500
DEFAULT_OVERLAP_TOKENS = 50

_KB_NAME_RE = re.compile(r"^[\w.-]+$")
# Sentence end: CJK or ASCII terminator (plus closing quotes), then any whitespace.
_SENTENCE_END = re.compile(r"(?:[。！？!?]|\.(?=\s|$))[”’\"')）]*\s*|\n\s*")


class UnknownKnowledgeBase(KeyError):
    pass


class EmbeddingError(RuntimeError):
    pass


@dataclass
class Document:
    id: str
    kb_name: str
    title: str
    body: str
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ValueError(f"document {self.id!r} has an empty body")


@dataclass
class Chunk:
    doc_id: str
    ordinal: int
    text: str
    vector: list[float]
    title: str = ""
    metadata: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "ordinal": self.ordinal, "text": self.text, "title": self.title,
                "metadata": self.metadata, "vector": self.vector}

    @classmethod
    def from_dict(cls, d: dict) -> "Chunk":
        return cls(d["doc_id"], int(d["ordinal"]), d["text"], [float(x) for x in d["vector"]],
                   d.get("title", ""), dict(d.get("metadata") or {}))


@dataclass
class RetrievalHit:
    kb_name: str
    chunk: Chunk
    score: float

    def to_dict(self, with_vector: bool = False) -> dict:
        chunk = self.chunk.to_dict()
        if not with_vector:
            chunk.pop("vector")
        return {"kb_name": self.kb_name, "score": self.score, "chunk": chunk}


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(y * y for y in b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine is undefined for a zero vector")
    return math.fsum(x * y for x, y in zip(a, b)) / (na * nb)


def _sentence_spans(body: str) -> list[tuple[int, int]]:
    spans = []
    start = 0
    for m in _SENTENCE_END.finditer(body):
        if m.end() > start:
            spans.append((start, m.end()))
            start = m.end()
    if start < len(body):
        spans.append((start, len(body)))
    return spans


def _split_long(body: str, span: tuple[int, int], limit: int) -> list[tuple[int, int]]:
    """Cut a span holding more than ``limit`` tokens at token boundaries."""
    s, e = span
    toks = [(a + s, b + s) for a, b in token_spans(body[s:e])]
    if len(toks) <= limit:
        return [span]
    pieces = []
    cur = s
    for i in range(limit, len(toks), limit):
        cut = toks[i][0]
        pieces.append((cur, cut))
        cur = cut
    pieces.append((cur, e))
    return pieces


def chunk_spans(body: str, target_size: int = DEFAULT_CHUNK_TOKENS,
                overlap: int = DEFAULT_OVERLAP_TOKENS) -> list[tuple[int, int]]:
    """Character spans of chunks, snapped to sentence boundaries where possible."""
    if not body:
        return []
    if target_size < 1 or overlap < 0:
        raise ValueError("target_size must be positive and overlap non-negative")
    units: list[tuple[int, int]] = []
    for span in _sentence_spans(body):
        units.extend(_split_long(body, span, target_size))
    sizes = [len(tokenize(body[s:e])) for s, e in units]
    if sum(sizes) <= target_size:
        return [(0, len(body))]

    spans = []
    i = 0
    n = len(units)
    while i < n:
        j = i
        total = sizes[i]
        while j + 1 < n and total + sizes[j + 1] <= target_size:
            j += 1
            total += sizes[j]
        spans.append((units[i][0], units[j][1]))
        if j == n - 1:
            break
        # Next chunk starts with the trailing units of this one that fit the overlap.
        k = j + 1
        carried = 0
        while k - 1 > i and carried + sizes[k - 1] <= overlap:
            k -= 1
            carried += sizes[k]
        # Shrink the overlap until the next unit fits, so every chunk advances.
        while k <= j and carried + sizes[j + 1] > target_size:
            carried -= sizes[k]
            k += 1
        i = k
    return spans


def chunk_text(body: str, target_size: int = DEFAULT_CHUNK_TOKENS,
               overlap: int = DEFAULT_OVERLAP_TOKENS) -> list[str]:
    if not body:
        raise ValueError("cannot chunk an empty body")
    return [body[s:e] for s, e in chunk_spans(body, target_size, overlap)]


class Embedder(Protocol):
    dim: int | None

    def embed(self, text: str) -> list[float]: ...

    def embed_many(self, texts: Sequence[str]) -> list[list[float]]: ...


class FallbackEmbedder:
    """Signed feature hashing of CJK-aware tokens, L2-normalized.

    Uses blake2b so vectors are identical across processes (unlike ``hash``).
    """

    def __init__(self, dim: int = FALLBACK_DIM):
        self.dim = dim

    def _bucket(self, token: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
        return (h >> 1) % self.dim, (1.0 if h & 1 else -1.0)

    def embed(self, text: str) -> list[float]:
        if not text.strip():
            raise EmbeddingError("cannot embed empty text")
        tokens = [t.casefold() for t in tokenize(text)] or [c for c in text if not c.isspace()]
        vec = [0.0] * self.dim
        for tok in tokens:
            idx, sign = self._bucket(tok)
            vec[idx] += sign
        norm = math.sqrt(math.fsum(x * x for x in vec))
        if norm == 0.0:
            # Every token cancelled out; fall back to the unsigned bucket profile.
            for tok in tokens:
                vec[self._bucket(tok)[0]] += 1.0
            norm = math.sqrt(math.fsum(x * x for x in vec))
        return [x / norm for x in vec]

    def embed_many(self, texts: Sequence[str]) -> list[list[float]]:
        return [self.embed(t) for t in texts]


class RemoteEmbedder:
    """``POST {base_url}/embeddings`` with ``{"input": [...]}``; reads ``data[i].embedding``."""

    def __init__(self, base_url: str, model: str = "m3e-base", api_key_env: str = "FINTEAM_API_KEY",
                 timeout: float = 30.0, client: httpx.Client | None = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.dim: int | None = None
        self._client = client or httpx.Client(timeout=timeout)

    def embed_many(self, texts: Sequence[str]) -> list[list[float]]:
        if any(not t.strip() for t in texts):
            raise EmbeddingError("cannot embed empty text")
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self._client.post(f"{self.base_url}/embeddings",
                                     json={"model": self.model, "input": list(texts)}, headers=headers)
        except httpx.TransportError as exc:
            raise EmbeddingError(f"embedding request failed: {exc}") from exc
        if resp.status_code != 200:
            raise EmbeddingError(f"embedding endpoint returned HTTP {resp.status_code}")
        try:
            data = resp.json()["data"]
            vectors = [[float(x) for x in item["embedding"]] for item in data]
        except (ValueError, KeyError, TypeError) as exc:
            raise EmbeddingError(f"malformed embedding response: {exc}") from exc
        if len(vectors) != len(texts):
            raise EmbeddingError("embedding count differs from input count")
        return vectors

    def embed(self, text: str) -> list[float]:
        return self.embed_many([text])[0]


class _KB:
    def __init__(self, name: str):
        self.name = name
        self.chunks: list[Chunk] = []
        self.lock = threading.Lock()
        self._matrix: np.ndarray | None = None

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            m = np.array([c.vector for c in self.chunks], dtype=float)
            norms = np.linalg.norm(m, axis=1) if len(m) else np.zeros(0)
            self._matrix = m / np.where(norms == 0, 1.0, norms)[:, None] if len(m) else m
        return self._matrix


class KnowledgeStore:
    """Flat-scan vector store. One JSON-lines file per kb under ``data_dir``."""

    def __init__(self, data_dir: str | Path | None = None, embedder: Embedder | None = None,
                 chunk_tokens: int = DEFAULT_CHUNK_TOKENS, overlap_tokens: int = DEFAULT_OVERLAP_TOKENS):
        self.data_dir = Path(data_dir) if data_dir else None
        self.embedder = embedder or FallbackEmbedder()
        self.chunk_tokens = chunk_tokens
        self.overlap_tokens = overlap_tokens
        self._kbs: dict[str, _KB] = {}
        self._lock = threading.Lock()
        if self.data_dir:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            for path in sorted(self.data_dir.glob("*.jsonl")):
                self._load(path)

    def _load(self, path: Path) -> None:
        kb = _KB(path.stem)
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    kb.chunks.append(Chunk.from_dict(json.loads(line)))
        self._kbs[kb.name] = kb

    def _save(self, kb: _KB) -> None:
        if not self.data_dir:
            return
        path = self.data_dir / f"{kb.name}.jsonl"
        tmp = path.with_suffix(".jsonl.tmp")
        with tmp.open("w", encoding="utf-8") as fh:
            for chunk in kb.chunks:
                fh.write(json.dumps(chunk.to_dict(), ensure_ascii=False) + "\n")
        tmp.replace(path)

    def kb_names(self) -> list[str]:
        return sorted(self._kbs)

    def has_kb(self, name: str) -> bool:
        return name in self._kbs

    def create_kb(self, name: str) -> None:
        if not _KB_NAME_RE.match(name):
            raise ValueError(f"invalid knowledge base name {name!r}")
        with self._lock:
            if name not in self._kbs:
                self._kbs[name] = _KB(name)
                self._save(self._kbs[name])

    def _kb(self, name: str) -> _KB:
        try:
            return self._kbs[name]
        except KeyError:
            raise UnknownKnowledgeBase(name) from None

    def chunks(self, kb_name: str) -> list[Chunk]:
        return list(self._kb(kb_name).chunks)

    def ingest(self, doc: Document) -> list[Chunk]:
        """Chunk, embed and store ``doc``; re-ingesting an id replaces its chunks."""
        self.create_kb(doc.kb_name)
        kb = self._kb(doc.kb_name)
        texts = chunk_text(doc.body, self.chunk_tokens, self.overlap_tokens)
        vectors = self.embedder.embed_many(texts)
        new = [Chunk(doc.id, i, t, v, doc.title, dict(doc.metadata)) for i, (t, v) in enumerate(zip(texts, vectors))]
        with kb.lock:
            kb.chunks = [c for c in kb.chunks if c.doc_id != doc.id] + new
            kb._matrix = None
            self._save(kb)
        return new

    def ingest_many(self, docs: Iterable[Document]) -> int:
        return sum(len(self.ingest(d)) for d in docs)

    def ingest_path(self, kb_name: str, path: str | Path) -> int:
        """Ingest a file or directory of ``.txt``/``.md``/``.jsonl`` files. Returns chunk count."""
        return self.ingest_many(load_documents(kb_name, path))

    def retrieve(self, kb_name: str, query: str, k: int) -> list[RetrievalHit]:
        if k < 1:
            raise ValueError("k must be at least 1")
        kb = self._kb(kb_name)
        with kb.lock:
            chunks = kb.chunks
            matrix = kb.matrix()
        if not chunks:
            return []
        q = np.asarray(self.embedder.embed(query), dtype=float)
        qn = np.linalg.norm(q)
        if q.shape[0] != matrix.shape[1]:
            raise ValueError(f"query dimension {q.shape[0]} differs from store dimension {matrix.shape[1]}")
        if qn == 0:
            raise ValueError("query embedded to a zero vector")
        scores = np.clip(matrix @ (q / qn), -1.0, 1.0)
        order = sorted(range(len(chunks)), key=lambda i: (-scores[i], chunks[i].doc_id, chunks[i].ordinal))
        return [RetrievalHit(kb_name, chunks[i], float(scores[i])) for i in order[:k]]


def load_documents(kb_name: str, path: str | Path) -> list[Document]:
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    docs: list[Document] = []
    for f in files:
        suffix = f.suffix.lower()
        if suffix in (".txt", ".md"):
            body = f.read_text(encoding="utf-8")
            if not body.strip():
                log.warning("skipping empty file %s", f)
                continue
            doc_id = f.relative_to(path).as_posix() if path.is_dir() else f.name
            docs.append(Document(doc_id, kb_name, f.stem, body, {"source": str(f)}))
        elif suffix == ".jsonl":
            with f.open(encoding="utf-8") as fh:
                for n, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    try:
                        docs.append(Document(str(rec["id"]), kb_name, rec.get("title", ""), rec["body"],
                                             {k: str(v) for k, v in (rec.get("metadata") or {}).items()}))
                    except KeyError as exc:
                        raise ValueError(f"{f}:{n}: record lacks field {exc}") from None
    return docs
