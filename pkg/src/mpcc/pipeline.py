"""Experiment lifecycle: world, datasets, benchmark, training, evaluation, reports.

Every command reads the resolved :class:`ExperimentConfig` and writes inside
``config["out"]``, which one run owns exclusively.  ``manifest.json`` in that
directory indexes every file the run produced.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import tokens as T
from .base import BaseConfig, build_base
from .bench import (EASY, HARD, SUBSETS, ChoiceQuestion, JudgmentScores, ScoreTable, answer_choice,
                    build_questions, fmt_cell, oracle_choice, oracle_judgments, policy_judgments,
                    random_baseline_table, read_questions_jsonl, score_choices, score_judgments,
                    write_choice_answers, write_choice_report, write_judgment_report,
                    write_questions_jsonl)
from .config import ExperimentConfig
from .errors import InputError
from .grpo import RftConfig, train_rft, write_metrics_csv
from .policy import PolicyParams, load_checkpoint, save_checkpoint
from .reward import RewardWeights
from .sft import SftConfig, make_example, train_sft
from .world import (DifficultyThresholds, MaskedQuery, WorldConfig, build_world, filter_scenes,
                    read_queries_jsonl, sample_scene, synthesize_think_trace, world_from_dict,
                    world_to_dict, write_queries_jsonl)

# the response-format instruction the "prompt" strategy prepends to every query
INSTRUCTION = (T.THINK_OPEN, T.THINK_CLOSE, T.ANSWER_OPEN, T.ANSWER_CLOSE)

WORLD_FILE = "world.json"
CONFIG_FILE = "config.txt"
MANIFEST_FILE = "manifest.json"
DATA_FILES = {"train": "data/train.jsonl", "eval": "data/eval.jsonl",
              "ood_train": "data/ood_train.jsonl", "ood_test": "data/ood_test.jsonl"}
BENCH_FILES = {"full": "bench/eval_questions.jsonl", "ood": "bench/ood_questions.jsonl"}
TRAIN_SPLIT = {"full": "train", "ood": "ood_train"}
EVAL_SPLIT = {"full": "eval", "ood": "ood_test"}
GENERATION_KEYS = ("seed",)
REPORT_HEADER = ["strategy", "id_cho_e", "id_cho_h", "ood_cho_e", "ood_cho_h"]


# --------------------------------------------------------------------------- #
# manifest

def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def data_hash(cfg: ExperimentConfig) -> str:
    """Hash of the keys that determine generated files (world, datasets, questions)."""
    lines = [l for l in cfg.dumps().splitlines() if l.split(" =")[0] in GENERATION_KEYS
             or l.split(".")[0] in ("world", "data", "bench")]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def _run_key(cfg: ExperimentConfig) -> str:
    return f"{cfg['strategy']}/{cfg['train.split']}"


def _slug(cfg: ExperimentConfig) -> str:
    return f"{cfg['strategy'].replace('+', '_')}-{cfg['train.split']}"


class Manifest:
    """``manifest.json`` of one output directory."""

    def __init__(self, out: Path, data: dict):
        self.out = out
        self.data = data

    @classmethod
    def open(cls, cfg: ExperimentConfig) -> "Manifest":
        out = Path(cfg["out"])
        path = out / MANIFEST_FILE
        if path.exists():
            data = json.loads(path.read_text())
            if data.get("data_config_hash") != data_hash(cfg):
                raise InputError(f"{out} holds data generated with config hash {data.get('data_config_hash')}, "
                                 f"current world/data/bench settings hash to {data_hash(cfg)}; "
                                 f"use a fresh --out directory")
        else:
            data = {"data_config_hash": data_hash(cfg), "tool_version": __version__, "artifacts": {},
                    "timings": {}, "runs": {}, "evals": {}}
        data["config_hash"] = cfg.hash()
        return cls(out, data)

    def add(self, name: str, rel: str) -> None:
        self.data["artifacts"][name] = rel

    def path(self, name: str) -> Path:
        if name not in self.data["artifacts"]:
            raise InputError(f"{self.out}: no artifact {name!r} yet")
        return self.out / self.data["artifacts"][name]

    def save(self) -> None:
        missing = [r for r in self.data["artifacts"].values() if not (self.out / r).exists()]
        if missing:
            raise InputError(f"manifest references missing files: {', '.join(missing)}")
        (self.out / MANIFEST_FILE).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _start(cfg: ExperimentConfig) -> Manifest:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest.open(cfg)
    (out / CONFIG_FILE).write_text(cfg.dumps())
    man.add("config", CONFIG_FILE)
    return man


def _timed(man: Manifest, name: str, t0: float) -> None:
    man.data["timings"][name] = round(time.perf_counter() - t0, 3)


# --------------------------------------------------------------------------- #
# helpers

def world_config(cfg: ExperimentConfig) -> WorldConfig:
    return WorldConfig(n_objects=cfg["world.n_objects"], n_cues=cfg["world.n_cues"],
                       n_families=cfg["world.n_families"],
                       combos_per_family=cfg["world.combos_per_family"],
                       family_support=cfg["world.family_support"],
                       shared_combo_prob=cfg["world.shared_combo_prob"],
                       attribute_effects=cfg["world.attribute_effects"])


def thresholds(cfg: ExperimentConfig) -> DifficultyThresholds:
    return DifficultyThresholds(cfg["data.easy_max"], cfg["data.moderate_max"], cfg["data.filter_max"])


def base_config(cfg: ExperimentConfig) -> BaseConfig:
    return BaseConfig(init=cfg["policy.init"], corpus=cfg["policy.corpus"], embed_dim=cfg["policy.embed_dim"],
                      hidden_dim=cfg["policy.hidden_dim"], context=cfg["policy.context"],
                      max_len=cfg["policy.max_len"], pretrain_examples=cfg["policy.pretrain_examples"],
                      pretrain_steps=cfg["policy.pretrain_steps"],
                      pretrain_step_size=cfg["policy.pretrain_step_size"],
                      seed=cfg.seed_for("policy.seed"))


_BASE_CACHE: dict[tuple[str, BaseConfig], PolicyParams] = {}


def base_policy(cfg: ExperimentConfig, world) -> PolicyParams:
    """The pretrained base for this world and config, built once per process."""
    digest = hashlib.sha256(json.dumps(world_to_dict(world), sort_keys=True).encode()).hexdigest()
    key = (digest, base_config(cfg))
    if key not in _BASE_CACHE:
        _BASE_CACHE[key] = build_base(world, key[1])
    return _BASE_CACHE[key]


def sft_config(cfg: ExperimentConfig) -> SftConfig:
    return SftConfig(steps=cfg["sft.steps"], batch_size=cfg["sft.batch_size"],
                     step_size=cfg["sft.step_size"], answer_weight=cfg["sft.answer_weight"],
                     seed=cfg.seed_for("sft.seed"), drop_counter_oracle=cfg["sft.drop_counter_oracle"])


def rft_config(cfg: ExperimentConfig, prior_sampling: bool) -> RftConfig:
    return RftConfig(steps=cfg["rft.steps"], batch_queries=cfg["rft.batch_queries"],
                     group_size=cfg["rft.group_size"], temperature=cfg["rft.temperature"],
                     step_size=cfg["rft.step_size"], clip_norm=cfg["rft.clip_norm"] or None,
                     kl_coeff=cfg["rft.kl_coeff"], ref_refresh=cfg["rft.ref_refresh"],
                     prior_sampling=prior_sampling, seed=cfg.seed_for("rft.seed"),
                     reward_weights=RewardWeights(cfg["reward.w_fmt"], cfg["reward.w_exact"],
                                                  cfg["reward.w_sim"]))


def load_world(cfg: ExperimentConfig):
    path = Path(cfg["out"]) / WORLD_FILE
    if not path.exists():
        raise InputError(f"{path} not found; run `mpcc genworld` with this config first")
    return world_from_dict(json.loads(path.read_text()))


def _load_split(cfg: ExperimentConfig, world, split: str) -> list[tuple[MaskedQuery, str | None]]:
    path = Path(cfg["out"]) / DATA_FILES[split]
    if not path.exists():
        raise InputError(f"{path} not found; run `mpcc gendata` with this config first")
    return read_queries_jsonl(path, world)


def ood_partition(cfg: ExperimentConfig, n_families: int) -> tuple[list[int], list[int]]:
    """Disjoint (train families, test families), drawn from the data seed."""
    k = cfg["data.ood_test_families"]
    if not 1 <= k < n_families:
        raise InputError(f"data.ood_test_families must be in [1, {n_families - 1}], got {k}")
    perm = np.random.default_rng([cfg.seed_for("data.seed"), 99]).permutation(n_families)
    return sorted(int(f) for f in perm[k:]), sorted(int(f) for f in perm[:k])


# --------------------------------------------------------------------------- #
# generation

def cmd_genworld(cfg: ExperimentConfig) -> Path:
    t0 = time.perf_counter()
    man = _start(cfg)
    world = build_world(world_config(cfg), seed=cfg.seed_for("world.seed"))
    (man.out / WORLD_FILE).write_text(json.dumps(world_to_dict(world), sort_keys=True, indent=1) + "\n")
    man.add("world", WORLD_FILE)
    _timed(man, "genworld", t0)
    man.save()
    return man.out / WORLD_FILE


def _draw_split(cfg, world, n_scenes, families, rng, prefix, with_think):
    scenes = [sample_scene(world, rng, families) for _ in range(n_scenes)]
    queries = filter_scenes(world, scenes, thresholds(cfg), id_prefix=prefix)
    thinks = [None] * len(queries)
    if with_think and queries:
        n_think = int(round(cfg["data.think_fraction"] * len(queries)))
        for i in sorted(rng.permutation(len(queries))[:n_think]):
            thinks[i] = synthesize_think_trace(world, queries[i])
    return queries, thinks


def cmd_gendata(cfg: ExperimentConfig) -> dict[str, Path]:
    t0 = time.perf_counter()
    man = _start(cfg)
    world = load_world(cfg)
    seed = cfg.seed_for("data.seed")
    train_f, test_f = ood_partition(cfg, len(world.families))
    plan = {
        "train": (cfg["data.train_scenes"], None, True),
        "eval": (cfg["data.eval_scenes"], None, False),
        "ood_train": (cfg["data.train_scenes"], train_f, True),
        "ood_test": (cfg["data.eval_scenes"], test_f, False),
    }
    (man.out / "data").mkdir(exist_ok=True)
    written = {}
    for tag, (split, (n, fams, think)) in enumerate(plan.items()):
        rng = np.random.default_rng([seed, tag])
        queries, thinks = _draw_split(cfg, world, n, fams, rng, f"{split}-", think)
        path = man.out / DATA_FILES[split]
        write_queries_jsonl(path, world, queries, thinks)
        man.add(f"data.{split}", DATA_FILES[split])
        written[split] = path
    ids = [f.family_id for f in world.families]
    man.data["ood_partition"] = {"train_families": [ids[i] for i in train_f],
                                 "test_families": [ids[i] for i in test_f],
                                 "disjoint": not set(train_f) & set(test_f)}
    _timed(man, "gendata", t0)
    man.save()
    return written


def cmd_genbench(cfg: ExperimentConfig) -> dict[str, Path]:
    t0 = time.perf_counter()
    man = _start(cfg)
    world = load_world(cfg)
    (man.out / "bench").mkdir(exist_ok=True)
    written = {}
    for split, rel in BENCH_FILES.items():
        queries = [q for q, _ in _load_split(cfg, world, EVAL_SPLIT[split])]
        questions = build_questions(world, queries, cfg.seed_for("bench.seed") + len(written))
        write_questions_jsonl(man.out / rel, questions)
        man.add(f"bench.{split}", rel)
        written[split] = man.out / rel
    _timed(man, "genbench", t0)
    man.save()
    return written


# --------------------------------------------------------------------------- #
# training

def cmd_train(cfg: ExperimentConfig) -> Path | None:
    """Train the configured strategy; returns the checkpoint path (None for ``prompt``)."""
    t0 = time.perf_counter()
    man = _start(cfg)
    world = load_world(cfg)
    strategy, key, slug = cfg["strategy"], _run_key(cfg), _slug(cfg)
    records = _load_split(cfg, world, TRAIN_SPLIT[cfg["train.split"]])
    if strategy == "prompt":
        man.data["runs"][key] = {"mode": "evaluation-only", "phases": []}
        _timed(man, f"train {key}", t0)
        man.save()
        return None
    if not records:
        raise InputError(f"training split {TRAIN_SPLIT[cfg['train.split']]} is empty; "
                         f"raise data.train_scenes or data.filter_max and rerun gendata")
    params = base_policy(cfg, world)
    phases = []
    (man.out / "metrics").mkdir(exist_ok=True)
    if strategy in ("sft", "sft+rft"):
        examples = [make_example(q, tuple(think.split())) for q, think in records if think]
        if not examples:
            raise InputError("no think-annotated records for SFT; raise data.think_fraction")
        t1, init = time.perf_counter(), params.digest()
        res = train_sft(params, examples, sft_config(cfg))
        params = res.params
        rel = f"metrics/{slug}-sft.csv"
        with open(man.out / rel, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            w.writerows((i, repr(l)) for i, l in enumerate(res.losses))
        man.add(f"metrics.{key}.sft", rel)
        phases.append({"phase": "sft", "init_hash": init, "final_hash": params.digest(),
                       "steps": len(res.losses), "metrics": rel,
                       "seconds": round(time.perf_counter() - t1, 3)})
    if strategy in ("rft", "sft+rft", "rft+prior"):
        prior = strategy == "rft+prior"
        dataset = [(q, tuple(think.split()) if think else None) for q, think in records]
        t1, init = time.perf_counter(), params.digest()
        res = train_rft(params, dataset, rft_config(cfg, prior))
        params = res.params
        rel = f"metrics/{slug}-rft.csv"
        write_metrics_csv(man.out / rel, res.metrics)
        man.add(f"metrics.{key}.rft", rel)
        phases.append({"phase": "rft", "init_hash": init, "final_hash": params.digest(),
                       "steps": len(res.metrics), "prior_sampling": prior, "metrics": rel,
                       "seconds": round(time.perf_counter() - t1, 3)})
    (man.out / "checkpoints").mkdir(exist_ok=True)
    rel = f"checkpoints/{slug}.ckpt"
    save_checkpoint(params, man.out / rel)
    man.add(f"checkpoint.{key}", rel)
    man.data["runs"][key] = {"mode": "trained", "phases": phases, "checkpoint": rel,
                             "checkpoint_sha256": file_sha256(man.out / rel)}
    _timed(man, f"train {key}", t0)
    man.save()
    return man.out / rel


# --------------------------------------------------------------------------- #
# evaluation

def _vocab_hash(vocab: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(vocab).encode()).hexdigest()[:16]


def load_policy(cfg: ExperimentConfig, world, checkpoint: str | Path | None = None) -> PolicyParams:
    """The checkpoint to evaluate: explicit path, the run's own checkpoint, or the base."""
    if checkpoint is None:
        if cfg["strategy"] == "prompt":
            return base_policy(cfg, world)
        run = Manifest.open(cfg).data["runs"].get(_run_key(cfg))
        if not run or "checkpoint" not in run:
            raise InputError(f"no checkpoint for {_run_key(cfg)}; run `mpcc train` first or pass --checkpoint")
        checkpoint = Path(cfg["out"]) / run["checkpoint"]
    try:
        return load_checkpoint(checkpoint, expected_vocab=world.vocab)
    except InputError as exc:
        if "vocabulary" not in str(exc):
            raise
        with open(checkpoint, "rb") as fh:
            blob = fh.read()
        n = int.from_bytes(blob[8:16], "little")
        ck_vocab = json.loads(blob[16:16 + n])["vocab"]
        raise InputError(f"checkpoint vocab hash {_vocab_hash(ck_vocab)} does not match "
                         f"world vocab hash {_vocab_hash(world.vocab)}") from None


def with_instruction(query: MaskedQuery) -> MaskedQuery:
    return dataclasses.replace(query, prompt_tokens=INSTRUCTION + tuple(query.prompt_tokens))


def evaluate(params: PolicyParams, world, questions: Sequence[ChoiceQuestion],
             queries: dict[str, MaskedQuery], mode: str = "likelihood",
             instruction: bool = False):
    """Choice answers, choice table, and per-subset judgment scores for one policy."""
    view = {k: with_instruction(q) if instruction else q for k, q in queries.items()}
    answers = [(qq, answer_choice(params, qq, view[qq.query_ref], mode)) for qq in questions]
    judg: dict[str, list] = {}
    for qq in questions:
        if qq.format == HARD:
            judg.setdefault(qq.subset, []).extend(policy_judgments(params, qq, view[qq.query_ref]))
    return answers, score_choices(answers), {s: score_judgments(r) for s, r in judg.items()}


def oracle_scores(world, questions: Sequence[ChoiceQuestion], queries: dict[str, MaskedQuery]):
    table = score_choices((qq, oracle_choice(world, qq, queries[qq.query_ref])) for qq in questions)
    judg: dict[str, list] = {}
    for qq in questions:
        if qq.format == HARD:
            judg.setdefault(qq.subset, []).extend(oracle_judgments(world, qq, queries[qq.query_ref]))
    return table, {s: score_judgments(r) for s, r in judg.items()}


def cmd_eval(cfg: ExperimentConfig, checkpoint: str | Path | None = None,
             mode: str | None = None) -> dict[str, Path]:
    t0 = time.perf_counter()
    man = _start(cfg)
    world = load_world(cfg)
    mode = mode or cfg["eval.mode"]
    split, key, slug = cfg["train.split"], _run_key(cfg), _slug(cfg)
    params = load_policy(cfg, world, checkpoint)
    qpath = Path(cfg["out"]) / BENCH_FILES[split]
    if not qpath.exists():
        raise InputError(f"{qpath} not found; run `mpcc genbench` with this config first")
    questions = read_questions_jsonl(qpath)
    queries = {q.query_id: q for q, _ in _load_split(cfg, world, EVAL_SPLIT[split])}
    answers, table, judg = evaluate(params, world, questions, queries, mode,
                                    instruction=cfg["strategy"] == "prompt")
    o_table, o_judg = oracle_scores(world, questions, queries)
    half = JudgmentScores(50.0, 50.0, 50.0, 50.0)
    (man.out / "reports").mkdir(exist_ok=True)
    rels = {"choice": f"reports/{slug}-choice.csv", "judgment": f"reports/{slug}-judgment.csv",
            "answers": f"reports/{slug}-answers.jsonl"}
    write_choice_report(man.out / rels["choice"],
                        [(cfg["strategy"], table), ("random", random_baseline_table()), ("oracle", o_table)])
    write_judgment_report(man.out / rels["judgment"],
                          [(cfg["strategy"], judg), ("random", {s: half for s in SUBSETS}),
                           ("oracle", o_judg)])
    write_choice_answers(man.out / rels["answers"], answers)
    for name, rel in rels.items():
        man.add(f"report.{key}.{name}", rel)
    man.data["evals"][key] = {"strategy": cfg["strategy"], "split": split, "mode": mode,
                              "policy_hash": params.digest(),
                              "ave_e": table.ave_e, "ave_h": table.ave_h, "sum": table.sum,
                              "cells": {f"{s}/{f}": v for (s, f), v in sorted(table.cells.items())}}
    _timed(man, f"eval {key}", t0)
    man.save()
    return {k: man.out / v for k, v in rels.items()}


def cmd_score_external(questions_file: str | Path, answers_file: str | Path) -> str:
    """CSV text of the score table (choice answers) or judgment scores (yes/no answers)."""
    from .bench import score_external
    result = score_external(questions_file, answers_file)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if isinstance(result, ScoreTable):
        w.writerow(["hard_cho_e", "hard_cho_h", "moderate_cho_e", "moderate_cho_h",
                    "easy_cho_e", "easy_cho_h", "ave_e", "ave_h", "sum"])
        w.writerow([fmt_cell(v) for v in result.row()])
    else:
        w.writerow(["gt", "conf", "irre", "all"])
        w.writerow([fmt_cell(result.gt), fmt_cell(result.confusing),
                    fmt_cell(result.irrelevant), fmt_cell(result.all)])
    return buf.getvalue()


# --------------------------------------------------------------------------- #
# comparison report

def cmd_report(manifests: Sequence[str | Path]) -> str:
    """Table 3 layout: one row per strategy, in-distribution and OOD choice accuracy."""
    rows: dict[str, dict[str, Any]] = {}
    for m in manifests:
        path = Path(m)
        if path.is_dir():
            path = path / MANIFEST_FILE
        data = json.loads(path.read_text())
        for ev in data.get("evals", {}).values():
            row = rows.setdefault(ev["strategy"], {})
            side = "id" if ev["split"] == "full" else "ood"
            row[f"{side}_cho_e"], row[f"{side}_cho_h"] = ev["ave_e"], ev["ave_h"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for strategy in sorted(rows):
        w.writerow([strategy] + [fmt_cell(rows[strategy].get(c)) for c in REPORT_HEADER[1:]])
    return buf.getvalue()
