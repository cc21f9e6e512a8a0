from __future__ import annotations

import math
import re
from typing import Iterable

from .errors import NonFiniteError

_SAMPLE_SEP = re.compile(r"[\s,，、;；]+")


def count_samples(samples: Iterable[object]) -> int:
    return len(list(samples))


def parse_samples(text: str) -> list[str]:
    """Split a sample array such as ``[1, 2, 3]`` or ``1、2、3`` into items."""
    body = text.strip()
    if not body:
        return []
    if body[:1] in "[{（(【" and body[-1:] in "]})）】":
        body = body[1:-1]
    return [s for s in _SAMPLE_SEP.split(body) if s]


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the error function."""
    x = float(x)
    if not math.isfinite(x):
        raise NonFiniteError("normal_cdf needs a finite input")
    if x < 0:
        # erfc keeps relative precision in the lower tail.
        return 0.5 * math.erfc(-x / math.sqrt(2.0))
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
