"""Token vocabulary and text rendering shared by the policy, rewards and datasets.

Tag tokens render without surrounding spaces, every other token is separated by
a single space, so ``detokenize(["<think>", "see", "</think>"])`` gives
``"<think>see</think>"``.
"""
from __future__ import annotations

import re
from typing import Iterable, Sequence

BOS = "<bos>"
EOS = "<eos>"
MASK = "MASK"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
TAGS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)
SPECIALS = (BOS, EOS, MASK) + TAGS

# words used by the reasoning-trace template
TEMPLATE_WORDS = ("see", "region", "candidates", "likely", "possible", "unlikely", "conclude")

_SPLIT = re.compile(r"(<think>|</think>|<answer>|</answer>)|\s+")


def cue_token(cue: str) -> str:
    return f"CUE:{cue}"


def pos_token(pos: str) -> str:
    return f"POS:{pos}"


def size_token(size: str) -> str:
    return f"SIZE:{size}"


def build_vocab(objects: Sequence[str], cues: Sequence[str],
                positions: Sequence[str], sizes: Sequence[str]) -> tuple[str, ...]:
    """Full token vocabulary for a world, in a fixed order."""
    vocab = list(SPECIALS) + list(TEMPLATE_WORDS)
    vocab += [cue_token(c) for c in cues]
    vocab += [pos_token(p) for p in positions]
    vocab += [size_token(s) for s in sizes]
    vocab += list(objects)
    if len(set(vocab)) != len(vocab):
        raise ValueError("vocabulary entries collide; object names must not reuse reserved tokens")
    return tuple(vocab)


def detokenize(tokens: Iterable[str]) -> str:
    parts: list[str] = []
    prev_tag = True
    for tok in tokens:
        if tok == EOS:
            break
        is_tag = tok in TAGS
        if parts and not is_tag and not prev_tag:
            parts.append(" ")
        parts.append(tok)
        prev_tag = is_tag
    return "".join(parts)


def tokenize(text: str) -> list[str]:
    """Inverse of :func:`detokenize` for texts whose non-tag tokens contain no spaces."""
    return [t for t in _SPLIT.split(text) if t]
