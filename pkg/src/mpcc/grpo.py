"""Group-relative policy optimisation, with optional prior sampling.

With prior sampling one of the ``G`` group slots is filled by an annotated
reasoning trajectory instead of a policy sample. Its reward enters the group
mean/std like any other member and it receives its own advantage and gradient
term; no importance weighting is applied, so that term is off-policy.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericalError
from .policy import (PolicyParams, TokenBatch, Trajectory, make_trajectory, sample_batch,
                     snapshot_reference)
from .reward import RewardBreakdown, RewardWeights, score_tokens
from .sft import target_sequence
from .world import MaskedQuery

SKIP_SIGMA = 1e-8
METRIC_COLUMNS = ("step", "mean_reward", "mean_fmt", "mean_exact", "mean_sim",
                  "mean_abs_adv", "frac_skipped", "kl_est")


@dataclass(frozen=True)
class PriorTrajectory:
    query_ref: str
    annotated_tokens: tuple[str, ...]
    reward: RewardBreakdown


@dataclass(frozen=True)
class GroupMember:
    trajectory: Trajectory
    reward: RewardBreakdown
    advantage: float
    is_prior: bool = False


@dataclass(frozen=True, eq=False)
class TrajectoryGroup:
    query: MaskedQuery
    members: tuple[GroupMember, ...]
    mu: float
    sigma: float
    skipped: bool

    @property
    def query_ref(self) -> str:
        return self.query.query_id

    @property
    def advantages(self) -> np.ndarray:
        return np.array([m.advantage for m in self.members])

    @property
    def rewards(self) -> np.ndarray:
        return np.array([m.reward.total for m in self.members])


def normalize_advantages(rewards: Sequence[float]) -> tuple[np.ndarray, float, float, bool]:
    """(r - mean) / population std; all zeros and ``skipped`` when std < 1e-8."""
    r = np.asarray(rewards, dtype=float)
    mu = float(r.mean())
    sigma = float(r.std())
    if sigma < SKIP_SIGMA:
        return np.zeros_like(r), mu, sigma, True
    return (r - mu) / sigma, mu, sigma, False


def make_prior(query: MaskedQuery, think_tokens: Sequence[str],
               weights: RewardWeights | None = None) -> PriorTrajectory:
    toks = target_sequence(think_tokens, query.gold)
    reward = score_tokens(toks, query.gold, weights)
    if reward.r_fmt != 1.0:
        raise InputError(f"annotated trajectory for {query.query_id} is not well formed")
    return PriorTrajectory(query.query_id, toks, reward)


def assemble_group(query: MaskedQuery, trajectories: Sequence[Trajectory],
                   rewards: Sequence[RewardBreakdown], prior_index: int | None = None) -> TrajectoryGroup:
    adv, mu, sigma, skipped = normalize_advantages([r.total for r in rewards])
    members = tuple(GroupMember(t, r, float(a), i == prior_index)
                    for i, (t, r, a) in enumerate(zip(trajectories, rewards, adv)))
    return TrajectoryGroup(query, members, mu, sigma, skipped)


def rollout_groups(params: PolicyParams, queries: Sequence[MaskedQuery], G: int,
                   temperature: float, rngs: Sequence[np.random.Generator],
                   priors: Sequence[PriorTrajectory | None] | None = None,
                   weights: RewardWeights | None = None) -> list[TrajectoryGroup]:
    """Batched rollout: one group per query, each driven by its own rng stream."""
    if G < 2:
        raise ConfigError(f"group size G must be >= 2, got {G}")
    priors = list(priors) if priors is not None else [None] * len(queries)
    prompts, uniforms, owner = [], [], []
    for qi, (q, rng, prior) in enumerate(zip(queries, rngs, priors)):
        n = G - (prior is not None)
        pr = params.encode(q.prompt_tokens)
        prompts += [pr] * n
        uniforms.append(rng.random((n, params.max_len)))
        owner += [qi] * n
    ids, lps = sample_batch(params, prompts, np.concatenate(uniforms) if uniforms else
                            np.zeros((0, params.max_len)), temperature)

    prior_trajs: dict[int, Trajectory] = {}
    with_prior = [i for i, p in enumerate(priors) if p is not None]
    if with_prior:
        seqs = [params.encode(priors[i].annotated_tokens) for i in with_prior]
        batch = TokenBatch(params, [params.encode(queries[i].prompt_tokens) for i in with_prior], seqs)
        tok_lp = batch.token_logprobs(params)
        for j, i in enumerate(with_prior):
            lo, hi = batch.offsets[j], batch.offsets[j + 1]
            prior_trajs[i] = make_trajectory(params, queries[i].query_id, seqs[j], tok_lp[lo:hi])

    per_query: list[list[Trajectory]] = [[] for _ in queries]
    for k, qi in enumerate(owner):
        per_query[qi].append(make_trajectory(params, queries[qi].query_id, ids[k], lps[k]))
    groups = []
    for qi, q in enumerate(queries):
        trajs = per_query[qi]
        rewards = [score_tokens(t.response_tokens, q.gold, weights) for t in trajs]
        prior_index = None
        if priors[qi] is not None:
            trajs.append(prior_trajs[qi])
            rewards.append(score_tokens(priors[qi].annotated_tokens, q.gold, weights))
            prior_index = len(trajs) - 1
        groups.append(assemble_group(q, trajs, rewards, prior_index))
    return groups


def rollout_group(params: PolicyParams, query: MaskedQuery, G: int, temperature: float,
                  rng: np.random.Generator, prior: PriorTrajectory | None = None,
                  weights: RewardWeights | None = None) -> TrajectoryGroup:
    return rollout_groups(params, [query], G, temperature, [rng], [prior], weights)[0]


# --------------------------------------------------------------------------- #
# objective and update

def _objective_batch(params: PolicyParams, groups: Sequence[TrajectoryGroup]):
    live = [g for g in groups if not g.skipped]
    prompts, seqs, adv, owner = [], [], [], []
    for gi, g in enumerate(live):
        pr = params.encode(g.query.prompt_tokens)
        for m in g.members:
            prompts.append(pr)
            seqs.append(params.encode(m.trajectory.response_tokens))
            adv.append(m.advantage)
            owner.append(gi)
    if not seqs:
        return None, None
    return TokenBatch(params, prompts, seqs), np.asarray(adv)


def grpo_objective(params: PolicyParams, groups: Sequence[TrajectoryGroup],
                   ref: PolicyParams | None = None, kl_coeff: float = 0.0) -> float:
    """sum_groups sum_i A_i log pi(tau_i|q)  -  kl_coeff * mean per-token KL estimate."""
    batch, adv = _objective_batch(params, groups)
    if batch is None:
        return 0.0
    lp = batch.token_logprobs(params)
    value = float((adv * batch.segment_sums(lp)).sum())
    if kl_coeff > 0:
        if ref is None:
            raise InputError("kl_coeff > 0 requires a reference policy")
        diff = batch.token_logprobs(ref) - lp
        value -= kl_coeff * float((np.exp(diff) - diff - 1.0).mean())
    return value


def grpo_gradient(params: PolicyParams, groups: Sequence[TrajectoryGroup],
                  ref: PolicyParams | None = None,
                  kl_coeff: float = 0.0) -> tuple[np.ndarray, float]:
    """Gradient of :func:`grpo_objective` and the per-token KL estimate to ``ref``."""
    batch, adv = _objective_batch(params, groups)
    if batch is None:
        return np.zeros_like(params.theta), 0.0
    weights = adv[batch.seq]
    kl_est = 0.0
    if ref is not None:
        lp = batch.token_logprobs(params)
        diff = batch.token_logprobs(ref) - lp
        kl_est = float((np.exp(diff) - diff - 1.0).mean())
        if kl_coeff > 0:
            # d/dlogp of the k3 estimator is 1 - exp(ref - cur)
            weights = weights - kl_coeff * (1.0 - np.exp(diff)) / len(diff)
    return batch.grad(params, weights), kl_est


def _mean(xs) -> float:
    xs = list(xs)
    return float(np.mean(xs)) if xs else 0.0


def grpo_update(params: PolicyParams, groups: Sequence[TrajectoryGroup], step_size: float,
                ref: PolicyParams | None = None, kl_coeff: float = 0.0,
                clip_norm: float | None = None) -> tuple[PolicyParams, dict]:
    """One gradient-ascent step on the group objective; returns params and diagnostics."""
    if not groups:
        raise InputError("grpo_update needs at least one group")
    if kl_coeff < 0:
        raise ConfigError(f"kl_coeff must be nonnegative, got {kl_coeff}")
    g, kl_est = grpo_gradient(params, groups, ref, kl_coeff)
    if not np.all(np.isfinite(g)):
        bad = [gr.query_ref for gr in groups if not gr.skipped]
        raise NumericalError(f"non-finite GRPO gradient (groups: {', '.join(bad)})")
    norm = float(np.linalg.norm(g))
    if clip_norm and norm > clip_norm:
        g = g * (clip_norm / norm)
    new = params.with_theta(params.theta + step_size * g) if norm > 0 else params
    on_policy = [m for gr in groups for m in gr.members if not m.is_prior]
    diag = {
        "mean_reward": _mean(m.reward.total for m in on_policy),
        "mean_fmt": _mean(m.reward.r_fmt for m in on_policy),
        "mean_exact": _mean(m.reward.r_exact for m in on_policy),
        "mean_sim": _mean(m.reward.r_sim for m in on_policy),
        "mean_abs_adv": _mean(abs(m.advantage) for gr in groups for m in gr.members),
        "frac_skipped": _mean(gr.skipped for gr in groups),
        "kl_est": kl_est,
        "grad_norm": norm,
    }
    return new, diag


# --------------------------------------------------------------------------- #
# training loop

@dataclass(frozen=True)
class RftConfig:
    steps: int = 2000
    batch_queries: int = 8
    group_size: int = 8
    temperature: float = 1.0
    step_size: float = 0.05
    clip_norm: float | None = 5.0
    kl_coeff: float = 0.0
    ref_refresh: int = 0          # 0 = single snapshot at start
    prior_sampling: bool = False
    seed: int = 0
    reward_weights: RewardWeights = field(default_factory=RewardWeights)


@dataclass
class RftResult:
    params: PolicyParams
    metrics: list[dict] = field(default_factory=list)


def train_rft(params: PolicyParams, dataset: Sequence[tuple[MaskedQuery, Sequence[str] | None]],
              config: RftConfig | None = None,
              callback: Callable[[int, dict], bool] | None = None) -> RftResult:
    """Plain GRPO on every record, or prior-sampling groups for records carrying a think trace.

    ``dataset`` holds ``(query, think_tokens_or_None)`` pairs. ``callback(step, row)``
    may return True to stop early.
    """
    config = config or RftConfig()
    if not dataset:
        raise InputError("empty RFT dataset")
    rng = np.random.default_rng(config.seed)
    priors: list[PriorTrajectory | None] = []
    for q, think in dataset:
        use = config.prior_sampling and think is not None
        priors.append(make_prior(q, think, config.reward_weights) if use else None)
    b = min(config.batch_queries, len(dataset))
    ref = snapshot_reference(params)
    result = RftResult(params)
    for step in range(config.steps):
        if config.ref_refresh and step and step % config.ref_refresh == 0:
            ref = snapshot_reference(result.params)
        idx = rng.choice(len(dataset), size=b, replace=False)
        queries = [dataset[i][0] for i in idx]
        rngs = [np.random.default_rng([config.seed, step, zlib.crc32(q.query_id.encode())]) for q in queries]
        groups = rollout_groups(result.params, queries, config.group_size, config.temperature,
                                rngs, [priors[i] for i in idx], config.reward_weights)
        result.params, diag = grpo_update(result.params, groups, config.step_size, ref,
                                          config.kl_coeff, config.clip_norm)
        row = {"step": step, **{k: diag[k] for k in METRIC_COLUMNS[1:]}}
        result.metrics.append(row)
        if callback is not None and callback(step, row):
            break
    return result


def write_metrics_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])
