"""Tiny autoregressive categorical policy with analytic gradients.

Next-token features are the mean-pooled prompt embedding concatenated with the
embeddings of the last ``context`` response tokens (left-padded with ``<bos>``),
followed by one tanh hidden layer and a softmax over the shared vocabulary.

All heavy lifting goes through :class:`TokenBatch`, which flattens any number of
(prompt, response) pairs into one matrix of positions so a whole GRPO step is a
handful of matmuls.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tokens as T
from .errors import InputError

CHECKPOINT_MAGIC = b"MPCCPOL1"


@dataclass(frozen=True)
class Layout:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 128
    context: int = 4

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        V, d, h, k = self.vocab_size, self.embed_dim, self.hidden_dim, self.context
        return {
            "embed": (V, d),
            "w_hidden": (h, (k + 1) * d),
            "b_hidden": (h,),
            "w_out": (V, h),
            "b_out": (V,),
        }

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def descriptor(self) -> dict:
        return {"vocab_size": self.vocab_size, "embed_dim": self.embed_dim,
                "hidden_dim": self.hidden_dim, "context": self.context,
                "blocks": [[name, list(shape)] for name, shape in self.shapes.items()]}

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        """Views into ``theta`` (writes through)."""
        out, start = {}, 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            out[name] = theta[start:start + n].reshape(shape)
            start += n
        return out


@dataclass(frozen=True, eq=False)
class PolicyParams:
    theta: np.ndarray
    layout: Layout
    vocab: tuple[str, ...]
    max_len: int = 32

    def __post_init__(self):
        if self.theta.shape != (self.layout.size,):
            raise InputError(f"parameter vector has length {self.theta.shape}, layout needs {self.layout.size}")
        if len(self.vocab) != self.layout.vocab_size:
            raise InputError("vocabulary size does not match layout")

    @property
    def token_index(self) -> dict[str, int]:
        idx = self.__dict__.get("_token_index")
        if idx is None:
            idx = {t: i for i, t in enumerate(self.vocab)}
            object.__setattr__(self, "_token_index", idx)
        return idx

    def encode(self, toks: Sequence[str]) -> np.ndarray:
        idx = self.token_index
        try:
            return np.fromiter((idx[t] for t in toks), dtype=np.int64, count=len(toks))
        except KeyError as exc:
            raise InputError(f"out-of-vocabulary token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.vocab[int(i)] for i in ids)

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(theta, self.layout, self.vocab, self.max_len)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.layout.descriptor(), sort_keys=True).encode())
        h.update("\n".join(self.vocab).encode())
        h.update(np.ascontiguousarray(self.theta, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Trajectory:
    query_ref: str
    response_tokens: tuple[str, ...]
    segment_boundary: int
    logprob_total: float
    logprob_think: float
    logprob_answer: float


def init_policy(vocab: Sequence[str], *, embed_dim: int = 32, hidden_dim: int = 128,
                context: int = 4, max_len: int = 32, seed: int = 0,
                uniform: bool = True, scale: float = 0.5) -> PolicyParams:
    """Random embedding/hidden weights; with ``uniform`` the output layer is zero,
    so every next-token distribution is exactly uniform."""
    layout = Layout(len(vocab), embed_dim, hidden_dim, context)
    rng = np.random.default_rng(seed)
    theta = np.zeros(layout.size)
    p = layout.unpack(theta)
    p["embed"][:] = rng.normal(0.0, scale, p["embed"].shape)
    p["w_hidden"][:] = rng.normal(0.0, 1.0 / np.sqrt(p["w_hidden"].shape[1]), p["w_hidden"].shape)
    if not uniform:
        p["w_out"][:] = rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), p["w_out"].shape)
        p["b_out"][:] = rng.normal(0.0, 0.1, p["b_out"].shape)
        p["b_hidden"][:] = rng.normal(0.0, 0.1, p["b_hidden"].shape)
    return PolicyParams(theta, layout, tuple(vocab), max_len)


def snapshot_reference(params: PolicyParams) -> PolicyParams:
    theta = params.theta.copy()
    theta.setflags(write=False)
    return PolicyParams(theta, params.layout, params.vocab, params.max_len)


# --------------------------------------------------------------------------- #
# batched engine

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def next_token_logprobs(params: PolicyParams, prompt_ids: np.ndarray,
                        context_ids: np.ndarray) -> np.ndarray:
    """Log-distribution over the vocabulary for one prompt and one context window."""
    p = params.layout.unpack(params.theta)
    x = np.concatenate([p["embed"][prompt_ids].mean(axis=0), p["embed"][context_ids].ravel()])
    h = np.tanh(p["w_hidden"] @ x + p["b_hidden"])
    return _log_softmax(p["w_out"] @ h + p["b_out"])


class TokenBatch:
    """Teacher-forced positions for a list of (prompt ids, response ids) pairs."""

    def __init__(self, params: PolicyParams, prompts: Sequence[np.ndarray],
                 responses: Sequence[np.ndarray]):
        k = params.layout.context
        bos = params.token_index[T.BOS]
        V = params.layout.vocab_size
        self.n_seq = len(prompts)
        self.lengths = np.array([len(r) for r in responses], dtype=np.int64)
        n_rows = int(self.lengths.sum())
        self.seq = np.repeat(np.arange(self.n_seq), self.lengths)
        self.targets = np.concatenate([np.asarray(r, dtype=np.int64) for r in responses]) \
            if n_rows else np.zeros(0, dtype=np.int64)
        self.ctx = np.full((n_rows, k), bos, dtype=np.int64)
        row = 0
        for r in responses:
            padded = np.concatenate([np.full(k, bos, dtype=np.int64), np.asarray(r, dtype=np.int64)])
            L = len(r)
            for j in range(k):
                self.ctx[row:row + L, j] = padded[j:j + L]
            row += L
        # mean-pooling matrix (n_seq, V)
        self.pool = np.zeros((self.n_seq, V))
        for s, pr in enumerate(prompts):
            np.add.at(self.pool[s], pr, 1.0 / len(pr))
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)])

    def forward(self, params: PolicyParams):
        p = params.layout.unpack(params.theta)
        E = p["embed"]
        pooled = self.pool @ E                                   # (n_seq, d)
        x = np.concatenate([pooled[self.seq], E[self.ctx].reshape(len(self.seq), self.ctx.shape[1] * E.shape[1])], axis=1)
        h = np.tanh(x @ p["w_hidden"].T + p["b_hidden"])
        logp = _log_softmax(h @ p["w_out"].T + p["b_out"])
        return x, h, logp

    def token_logprobs(self, params: PolicyParams) -> np.ndarray:
        _, _, logp = self.forward(params)
        return logp[np.arange(len(self.targets)), self.targets]

    def segment_sums(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.seq, weights=values, minlength=self.n_seq)

    def grad(self, params: PolicyParams, weights: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_rows weights[row] * log p(target_row)``."""
        p = params.layout.unpack(params.theta)
        x, h, logp = self.forward(params)
        n = len(self.targets)
        d = params.layout.embed_dim
        probs = np.exp(logp)
        dlogits = -probs * weights[:, None]
        dlogits[np.arange(n), self.targets] += weights
        g = np.zeros_like(params.theta)
        gp = params.layout.unpack(g)
        gp["w_out"][:] = dlogits.T @ h
        gp["b_out"][:] = dlogits.sum(axis=0)
        dpre = (dlogits @ p["w_out"]) * (1.0 - h * h)
        gp["w_hidden"][:] = dpre.T @ x
        gp["b_hidden"][:] = dpre.sum(axis=0)
        dx = dpre @ p["w_hidden"]
        dpooled = np.zeros((self.n_seq, d))
        np.add.at(dpooled, self.seq, dx[:, :d])
        gp["embed"][:] += self.pool.T @ dpooled
        np.add.at(gp["embed"], self.ctx.ravel(), dx[:, d:].reshape(-1, d))
        return g


def segment_boundary(response: Sequence[str]) -> int:
    """Index just past the first ``</think>``; 0 when absent (whole response is answer)."""
    for i, tok in enumerate(response):
        if tok == T.THINK_CLOSE:
            return i + 1
    return 0


# --------------------------------------------------------------------------- #
# public per-trajectory API

def logprob(params: PolicyParams, query, response_tokens: Sequence[str]) -> tuple[float, float, float]:
    """(total, think, answer) teacher-forced log-likelihood in nats."""
    resp = params.encode(response_tokens)
    batch = TokenBatch(params, [params.encode(query.prompt_tokens)], [resp])
    lp = batch.token_logprobs(params)
    b = segment_boundary(response_tokens)
    think = float(lp[:b].sum())
    answer = float(lp[b:].sum())
    return think + answer, think, answer


def grad_logprob(params: PolicyParams, query, response_tokens: Sequence[str]) -> np.ndarray:
    resp = params.encode(response_tokens)
    batch = TokenBatch(params, [params.encode(query.prompt_tokens)], [resp])
    return batch.grad(params, np.ones(len(resp)))


def sample_batch(params: PolicyParams, prompts: Sequence[np.ndarray], uniforms: np.ndarray,
                 temperature: float = 1.0, greedy: bool = False,
                 stop_at_eos: bool = True) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Sample one response per prompt by inverse-CDF on ``uniforms`` (n, max_len).

    Returns token ids and untempered per-token log-probabilities for each row.
    """
    if not greedy and temperature <= 0:
        raise InputError(f"temperature must be positive, got {temperature}")
    p = params.layout.unpack(params.theta)
    E = p["embed"]
    n, L, k = len(prompts), params.max_len, params.layout.context
    bos = params.token_index[T.BOS]
    eos = params.token_index[T.EOS]
    pooled = np.stack([E[pr].mean(axis=0) for pr in prompts]) if n else np.zeros((0, E.shape[1]))
    ctx = np.full((n, k), bos, dtype=np.int64)
    out = np.zeros((n, L), dtype=np.int64)
    lps = np.zeros((n, L))
    lengths = np.full(n, L, dtype=np.int64)
    active = np.arange(n)
    for t in range(L):
        if len(active) == 0:
            break
        x = np.concatenate([pooled[active], E[ctx[active]].reshape(len(active), -1)], axis=1)
        h = np.tanh(x @ p["w_hidden"].T + p["b_hidden"])
        logp = _log_softmax(h @ p["w_out"].T + p["b_out"])
        if greedy:
            tok = np.argmax(logp, axis=1)
        else:
            lq = logp if temperature == 1.0 else _log_softmax(logp / temperature)
            cdf = np.cumsum(np.exp(lq), axis=1)
            u = uniforms[active, t] * cdf[:, -1]
            tok = np.minimum((cdf < u[:, None]).sum(axis=1), cdf.shape[1] - 1)
        out[active, t] = tok
        lps[active, t] = logp[np.arange(len(active)), tok]
        ctx[active, :-1] = ctx[active, 1:]
        ctx[active, -1] = tok
        if stop_at_eos:
            done = tok == eos
            lengths[active[done]] = t + 1
            active = active[~done]
    return [out[i, :lengths[i]] for i in range(n)], [lps[i, :lengths[i]] for i in range(n)]


def make_trajectory(params: PolicyParams, query_ref: str, ids: np.ndarray,
                    token_lps: np.ndarray) -> Trajectory:
    toks = params.decode(ids)
    b = segment_boundary(toks)
    think = float(token_lps[:b].sum())
    answer = float(token_lps[b:].sum())
    return Trajectory(query_ref, toks, b, think + answer, think, answer)


def sample_response(params: PolicyParams, query, temperature: float = 1.0,
                    rng: np.random.Generator | None = None, greedy: bool = False,
                    stop_at_eos: bool = True) -> Trajectory:
    """One autoregressive sample; log-probs are always those of the untempered model."""
    if not greedy and temperature <= 0:
        raise InputError(f"temperature must be positive, got {temperature}")
    if rng is None:
        rng = np.random.default_rng()
    u = np.zeros((1, params.max_len)) if greedy else rng.random((1, params.max_len))
    ids, lps = sample_batch(params, [params.encode(query.prompt_tokens)], u, temperature,
                            greedy, stop_at_eos)
    return make_trajectory(params, query.query_id, ids[0], lps[0])


# --------------------------------------------------------------------------- #
# checkpoints

def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    header = json.dumps({"layout": params.layout.descriptor(), "vocab": list(params.vocab),
                         "max_len": params.max_len}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(params.theta, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, expected_vocab: Sequence[str] | None = None,
                    expected_layout: Layout | None = None) -> PolicyParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a policy checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", blob[off:off + 8])
    header_bytes = blob[off + 8:off + 8 + n]
    header = json.loads(header_bytes)
    lay = header["layout"]
    layout = Layout(lay["vocab_size"], lay["embed_dim"], lay["hidden_dim"], lay["context"])
    if header["layout"] != layout.descriptor():
        raise InputError(f"{path}: layout descriptor is inconsistent")
    if expected_layout is not None and expected_layout.descriptor() != layout.descriptor():
        raise InputError(f"{path}: layout {layout} does not match expected {expected_layout}")
    if expected_vocab is not None and "\n".join(expected_vocab).encode() != "\n".join(header["vocab"]).encode():
        raise InputError(f"{path}: vocabulary does not match")
    theta = np.frombuffer(blob[off + 8 + n:], dtype="<f8").astype(np.float64)
    return PolicyParams(theta, layout, tuple(header["vocab"]), int(header["max_len"]))
