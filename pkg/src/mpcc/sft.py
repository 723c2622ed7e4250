"""Supervised fine-tuning on (query, think, answer) targets with token-level NLL."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tokens as T
from .errors import InputError, NumericalError
from .policy import PolicyParams, TokenBatch, segment_boundary
from .reward import normalize_text, parse_response
from .world import MaskedQuery, ThinkTrace


@dataclass(frozen=True, eq=False)
class SftExample:
    query: MaskedQuery
    target_tokens: tuple[str, ...]
    counter_oracle: bool = False

    @property
    def N(self) -> int:
        return len(self.target_tokens)


def target_sequence(think_tokens: Sequence[str], answer: str) -> tuple[str, ...]:
    """``<think> trace </think><answer> answer </answer>`` followed by the end token."""
    return (T.THINK_OPEN, *think_tokens, T.THINK_CLOSE, T.ANSWER_OPEN, answer, T.ANSWER_CLOSE, T.EOS)


def make_example(query: MaskedQuery, think: ThinkTrace | Sequence[str] | str) -> SftExample:
    if isinstance(think, ThinkTrace):
        toks, flag = think.tokens, think.counter_oracle
    elif isinstance(think, str):
        toks, flag = tuple(T.tokenize(think)), False
    else:
        toks, flag = tuple(think), False
    target = target_sequence(toks, query.gold)
    parsed = parse_response(target)
    if not parsed.format_ok or normalize_text(parsed.answer_text) != normalize_text(query.gold):
        raise InputError(f"example {query.query_id}: target does not parse to the gold answer")
    return SftExample(query, target, flag)


@dataclass(frozen=True)
class SftConfig:
    steps: int = 1000
    batch_size: int = 16
    step_size: float = 0.5
    answer_weight: float = 1.0
    clip_norm: float | None = None
    seed: int = 0
    drop_counter_oracle: bool = False


def _token_weights(examples: Sequence[SftExample], answer_weight: float) -> np.ndarray:
    """Per-token loss weights: 1/N each, answer segment scaled by ``answer_weight``."""
    ws = []
    for ex in examples:
        w = np.full(ex.N, 1.0 / ex.N)
        if answer_weight != 1.0:
            w[segment_boundary(ex.target_tokens):] *= answer_weight
        ws.append(w)
    return np.concatenate(ws)


def _batch(params: PolicyParams, examples: Sequence[SftExample]) -> TokenBatch:
    return TokenBatch(params, [params.encode(ex.query.prompt_tokens) for ex in examples],
                      [params.encode(ex.target_tokens) for ex in examples])


def sft_loss(params: PolicyParams, example: SftExample, answer_weight: float = 1.0) -> float:
    """Mean per-token negative log-likelihood of the target (teacher forcing)."""
    batch = _batch(params, [example])
    lp = batch.token_logprobs(params)
    return float(-(lp * _token_weights([example], answer_weight)).sum())


def sft_grad(params: PolicyParams, examples: Sequence[SftExample],
             answer_weight: float = 1.0) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss over ``examples``, its gradient, and per-example losses."""
    batch = _batch(params, examples)
    w = _token_weights(examples, answer_weight)
    lp = batch.token_logprobs(params)
    per_example = -batch.segment_sums(lp * w)
    g = -batch.grad(params, w) / len(examples)
    return float(per_example.mean()), g, per_example


def sft_step(params: PolicyParams, batch: Sequence[SftExample], step_size: float,
             answer_weight: float = 1.0, clip_norm: float | None = None) -> tuple[PolicyParams, float]:
    """One gradient-descent step; returns the new params and the pre-step batch loss."""
    if not batch:
        raise InputError("empty SFT batch")
    loss, g, per_example = sft_grad(params, batch, answer_weight)
    if not np.all(np.isfinite(g)):
        bad = [ex.query.query_id for ex, l in zip(batch, per_example) if not np.isfinite(l)]
        raise NumericalError(f"non-finite SFT gradient (examples: {', '.join(bad) or batch[0].query.query_id})")
    if clip_norm:
        norm = float(np.linalg.norm(g))
        if norm > clip_norm:
            g = g * (clip_norm / norm)
    return params.with_theta(params.theta - step_size * g), loss


@dataclass
class SftResult:
    params: PolicyParams
    losses: list[float] = field(default_factory=list)


def train_sft(params: PolicyParams, examples: Sequence[SftExample],
              config: SftConfig | None = None) -> SftResult:
    """Minibatch SFT with a seeded sampling order."""
    config = config or SftConfig()
    pool = [ex for ex in examples if not (config.drop_counter_oracle and ex.counter_oracle)]
    if not pool:
        raise InputError("no SFT examples to train on")
    rng = np.random.default_rng(config.seed)
    b = min(config.batch_size, len(pool))
    order = rng.permutation(len(pool))
    cursor = 0
    result = SftResult(params)
    for _ in range(config.steps):
        if cursor + b > len(order):
            order, cursor = rng.permutation(len(pool)), 0
        batch = [pool[i] for i in order[cursor:cursor + b]]
        cursor += b
        result.params, loss = sft_step(result.params, batch, config.step_size,
                                       config.answer_weight, config.clip_norm)
        result.losses.append(loss)
    return result


def mean_loss(params: PolicyParams, examples: Sequence[SftExample], answer_weight: float = 1.0) -> float:
    batch = _batch(params, examples)
    lp = batch.token_logprobs(params)
    return float(-batch.segment_sums(lp * _token_weights(examples, answer_weight)).mean())
