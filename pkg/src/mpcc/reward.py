"""Verifiable rewards: format check, exact match and Levenshtein-ratio similarity."""
from __future__ import annotations

import re
from functools import lru_cache
from dataclasses import dataclass
from typing import Sequence

from . import tokens as T
from .errors import InputError

_FORMAT = re.compile(r"\s*<think>(.*?)</think>\s*<answer>(.*?)</answer>\s*", re.DOTALL)


@dataclass(frozen=True)
class StructuredResponse:
    raw_text: str
    think_text: str
    answer_text: str
    format_ok: bool


@dataclass(frozen=True)
class RewardBreakdown:
    r_fmt: float
    r_exact: float
    r_sim: float
    total: float


@dataclass(frozen=True)
class RewardWeights:
    fmt: float = 1.0
    exact: float = 1.0
    sim: float = 1.0


def normalize_text(s: str) -> str:
    return " ".join(s.lower().split())


def parse_response(raw: str | Sequence[str]) -> StructuredResponse:
    """Split a response into think/answer segments.

    Accepts text or a token sequence (rendered with :func:`tokens.detokenize`).
    Anything not matching ``<think>..</think><answer>..</answer>`` exactly once,
    in that order, is malformed and its whole trimmed text becomes the answer.
    """
    text = raw if isinstance(raw, str) else T.detokenize(raw)
    m = _FORMAT.fullmatch(text)
    if m and all(text.count(tag) == 1 for tag in T.TAGS):
        return StructuredResponse(text, m.group(1).strip(), m.group(2).strip(), True)
    return StructuredResponse(text, "", text.strip(), False)


def levenshtein_distance(a: str, o: str) -> int:
    return _edit_distance(normalize_text(a), normalize_text(o))


@lru_cache(maxsize=65536)
def _edit_distance(a: str, o: str) -> int:
    if len(a) < len(o):
        a, o = o, a
    if not o:
        return len(a)
    prev = list(range(len(o) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, co in enumerate(o, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != co)))
        prev = cur
    return prev[-1]


def levenshtein_ratio(a: str, o: str) -> float:
    """1 - distance / longer length, on normalized strings; 1.0 for two empty strings."""
    na, no = normalize_text(a), normalize_text(o)
    longest = max(len(na), len(no))
    if longest == 0:
        return 1.0
    return 1.0 - _edit_distance(na, no) / longest


def compute_reward(response: StructuredResponse, gold: str,
                   weights: RewardWeights | None = None) -> RewardBreakdown:
    w = weights or RewardWeights()
    gold_n = normalize_text(gold)
    if not gold_n:
        raise InputError("gold answer is empty after normalization")
    ans_n = normalize_text(response.answer_text)
    r_fmt = 1.0 if response.format_ok else 0.0
    r_exact = 1.0 if ans_n == gold_n else 0.0
    r_sim = levenshtein_ratio(ans_n, gold_n) if ans_n else 0.0
    return RewardBreakdown(r_fmt, r_exact, r_sim, w.fmt * r_fmt + w.exact * r_exact + w.sim * r_sim)


def score_tokens(response_tokens: Sequence[str], gold: str,
                 weights: RewardWeights | None = None) -> RewardBreakdown:
    return compute_reward(parse_response(response_tokens), gold, weights)
