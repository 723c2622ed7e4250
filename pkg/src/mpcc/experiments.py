"""Seeded replicate experiments: RFT convergence, prior-sampling speed-up, strategy ordering.

Each replicate seed fixes the world, the base policy, the data and the rollouts,
so paired comparisons (plain RFT vs RFT with prior sampling) share everything
except the strategy.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pipeline
from .base import BaseConfig, build_base
from .bench import read_questions_jsonl
from .config import ExperimentConfig
from .grpo import RftConfig, train_rft
from .policy import PolicyParams
from .world import (MaskedQuery, WorldConfig, WorldModel, build_world, generate_queries,
                    read_queries_jsonl, synthesize_think_trace)


@dataclass(frozen=True)
class Replicate:
    seed: int
    world: WorldModel
    base: PolicyParams


def replicate(seed: int, base: BaseConfig | None = None, world: WorldConfig | None = None) -> Replicate:
    w = build_world(world or WorldConfig(), seed=seed * 1000 + 1)
    cfg = base or BaseConfig()
    return Replicate(seed, w, build_base(w, BaseConfig(**{**cfg.__dict__, "seed": seed})))


def easy_dataset(rep: Replicate, n: int = 200) -> list[MaskedQuery]:
    return generate_queries(rep.world, n, np.random.default_rng([rep.seed, 4]), difficulties=["easy"],
                            id_prefix="easy")


def annotated_dataset(rep: Replicate, n: int = 200, think_fraction: float = 0.5):
    """(query, think tokens or None) pairs; a seeded ``think_fraction`` carries a trace."""
    qs = generate_queries(rep.world, n, np.random.default_rng([rep.seed, 5]), id_prefix="tr")
    keep = set(np.random.default_rng([rep.seed, 6]).permutation(n)[:int(round(think_fraction * n))].tolist())
    return [(q, synthesize_think_trace(rep.world, q).tokens if i in keep else None) for i, q in enumerate(qs)]


def final_exact(rep: Replicate, steps: int = 2000, tail: int = 100, config: RftConfig | None = None) -> float:
    """Plain GRPO on easy queries; mean exact-match component over the last ``tail`` steps."""
    cfg = config or RftConfig(steps=steps, seed=rep.seed)
    res = train_rft(rep.base, [(q, None) for q in easy_dataset(rep)], cfg)
    return float(np.mean([m["mean_exact"] for m in res.metrics[-tail:]]))


def steps_to_format(params: PolicyParams, dataset, config: RftConfig, threshold: float = 0.9,
                    window: int = 20) -> tuple[int | None, list[dict]]:
    """First step at which the trailing ``window``-step mean format reward reaches ``threshold``.

    Runs at most ``config.steps`` steps; returns None if the threshold is never reached.
    """
    fmt: list[float] = []

    def reached() -> bool:
        return len(fmt) >= window and float(np.mean(fmt[-window:])) >= threshold

    def stop(step: int, row: dict) -> bool:
        fmt.append(row["mean_fmt"])
        return reached()

    res = train_rft(params, dataset, config, callback=stop)
    return (len(res.metrics) if reached() else None), res.metrics


def format_race(rep: Replicate, max_steps: int = 2000, dataset=None) -> dict:
    """Steps for RFT with prior sampling to reach the format threshold, then plain RFT on the same budget."""
    data = dataset if dataset is not None else annotated_dataset(rep)
    n_prior, prior_rows = steps_to_format(rep.base, data, RftConfig(steps=max_steps, seed=rep.seed,
                                                                      prior_sampling=True))
    budget = n_prior if n_prior is not None else max_steps
    n_plain, plain_rows = steps_to_format(rep.base, data, RftConfig(steps=budget, seed=rep.seed))
    return {"seed": rep.seed, "prior_steps": n_prior, "plain_steps": n_plain, "budget": budget,
            "fmt_step0": prior_rows[0]["mean_fmt"] if prior_rows else None,
            "plain_fmt_step0": plain_rows[0]["mean_fmt"] if plain_rows else None,
            "prior_faster": n_prior is not None and (n_plain is None or n_prior < n_plain)}


def strategy_scores(cfg: ExperimentConfig, strategies: Sequence[str] = ("sft", "rft", "sft+rft", "rft+prior")
                    ) -> dict[str, float]:
    """Run the full pipeline in ``cfg['out']``; in-distribution Ave Cho.E per strategy and for the base."""
    for cmd in (pipeline.cmd_genworld, pipeline.cmd_gendata, pipeline.cmd_genbench):
        cmd(cfg)
    out: dict[str, float] = {}
    for s in strategies:
        c = cfg.replace(strategy=s)
        pipeline.cmd_train(c)
        pipeline.cmd_eval(c)
    evals = pipeline.Manifest.open(cfg).data["evals"]
    for s in strategies:
        out[s] = evals[f"{s}/full"]["ave_e"]
    world = pipeline.load_world(cfg)
    questions = read_questions_jsonl(Path(cfg["out"]) / pipeline.BENCH_FILES["full"])
    queries = {q.query_id: q for q, _ in read_queries_jsonl(Path(cfg["out"]) / pipeline.DATA_FILES["eval"], world)}
    _, table, _ = pipeline.evaluate(pipeline.base_policy(cfg, world), world, questions, queries)
    out["base"] = table.ave_e
    out["oracle"] = pipeline.oracle_scores(world, questions, queries)[0].ave_e
    return out
