"""CJK-aware tokenization shared by chunking, embeddings and ROUGE."""

from __future__ import annotations

import re

# Han (incl. ext. A and compatibility), kana, hangul, CJK punctuation excluded.
_CJK_RANGES = (
    "぀-ヿ"  # hiragana, katakana
    "㐀-䶿"  # CJK ext A
    "一-鿿"  # CJK unified
    "가-힯"  # hangul syllables
    "豈-﫿"  # CJK compatibility
)

_TOKEN_RE = re.compile(rf"([{_CJK_RANGES}])|([^\W{_CJK_RANGES}]+)")
_CJK_RE = re.compile(rf"[{_CJK_RANGES}]")


def is_cjk(ch: str) -> bool:
    return bool(_CJK_RE.fullmatch(ch))


def tokenize(text: str) -> list[str]:
    """Split into tokens: every CJK codepoint alone, other word runs whole."""
    return [m.group(0) for m in _TOKEN_RE.finditer(text)]


def token_spans(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def count_tokens(text: str) -> int:
    return sum(1 for _ in _TOKEN_RE.finditer(text))
