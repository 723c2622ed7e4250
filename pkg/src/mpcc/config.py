"""Experiment configuration: ``key = value`` lines with dotted namespaces.

Every key has a default and a one-line description (see :data:`SCHEMA`);
unknown keys and unparsable values are rejected with :class:`ConfigError`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError

STRATEGIES = ("prompt", "sft", "rft", "sft+rft", "rft+prior")
SPLITS = ("full", "ood")
MODES = ("likelihood", "generate-match")
INITS = ("base", "uniform", "random")
CORPORA = ("cue", "family")


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    kind: type
    doc: str
    choices: tuple[str, ...] | None = None


SCHEMA: tuple[Key, ...] = (
    Key("seed", 0, int, "master seed; component seeds of -1 derive from it"),
    Key("out", "runs/default", str, "output directory owned by this run"),
    Key("strategy", "rft", str, "fine-tuning strategy", STRATEGIES),
    Key("world.n_objects", 24, int, "number of target objects K"),
    Key("world.n_cues", 48, int, "number of context cues M"),
    Key("world.n_families", 6, int, "number of scene families"),
    Key("world.combos_per_family", 8, int, "cue combinations per family"),
    Key("world.family_support", 9, int, "objects possible within one family"),
    Key("world.shared_combo_prob", 0.15, float, "chance a cue combination is shared with another family"),
    Key("world.attribute_effects", False, bool, "position/size bins shift the posterior"),
    Key("world.seed", -1, int, "world seed (-1: derive from seed)"),
    Key("data.train_scenes", 600, int, "scenes drawn for each training split before filtering"),
    Key("data.eval_scenes", 450, int, "scenes drawn for each evaluation split before filtering"),
    Key("data.think_fraction", 0.5, float, "fraction of training records carrying a reasoning trace"),
    Key("data.easy_max", 0.5, float, "entropy (bits) below which a query is easy"),
    Key("data.moderate_max", 1.5, float, "entropy (bits) below which a query is moderate"),
    Key("data.filter_max", 2.5, float, "queries with entropy above this are rejected"),
    Key("data.ood_test_families", 2, int, "families held out for the OOD test split"),
    Key("data.seed", -1, int, "dataset seed (-1: derive from seed)"),
    Key("bench.seed", -1, int, "question shuffling seed (-1: derive from seed)"),
    Key("policy.init", "base", str, "starting policy: pretrained base, uniform, or random", INITS),
    Key("policy.corpus", "cue", str, "base pretraining corpus: single-cue co-occurrence or family marginals",
        CORPORA),
    Key("policy.pretrain_examples", 3000, int, "size of the base policy's co-occurrence corpus"),
    Key("policy.pretrain_steps", 1000, int, "base pretraining steps"),
    Key("policy.pretrain_step_size", 0.5, float, "base pretraining step size"),
    Key("policy.embed_dim", 32, int, "token embedding width"),
    Key("policy.hidden_dim", 128, int, "hidden layer width"),
    Key("policy.context", 4, int, "number of previous response tokens seen"),
    Key("policy.max_len", 32, int, "maximum response length in tokens"),
    Key("policy.seed", -1, int, "initialisation seed (-1: derive from seed)"),
    Key("sft.steps", 1000, int, "SFT optimisation steps"),
    Key("sft.batch_size", 16, int, "SFT examples per step"),
    Key("sft.step_size", 0.5, float, "SFT gradient-descent step size"),
    Key("sft.answer_weight", 1.0, float, "loss weight of answer-segment tokens"),
    Key("sft.drop_counter_oracle", False, bool, "skip traces whose gold disagrees with the oracle argmax"),
    Key("sft.seed", -1, int, "SFT batch-order seed (-1: derive from seed)"),
    Key("rft.steps", 2000, int, "GRPO steps"),
    Key("rft.batch_queries", 8, int, "queries (groups) per step"),
    Key("rft.group_size", 8, int, "responses per group G"),
    Key("rft.temperature", 1.0, float, "rollout sampling temperature"),
    Key("rft.step_size", 0.05, float, "gradient-ascent step size"),
    Key("rft.clip_norm", 5.0, float, "gradient-norm clip (0 disables)"),
    Key("rft.kl_coeff", 0.0, float, "KL-to-reference penalty coefficient"),
    Key("rft.ref_refresh", 0, int, "refresh the reference every N steps (0: never)"),
    Key("rft.seed", -1, int, "rollout seed (-1: derive from seed)"),
    Key("reward.w_fmt", 1.0, float, "weight of the format reward"),
    Key("reward.w_exact", 1.0, float, "weight of the exact-match reward"),
    Key("reward.w_sim", 1.0, float, "weight of the Levenshtein-ratio reward"),
    Key("train.split", "full", str, "train on all families or on the OOD training families", SPLITS),
    Key("eval.mode", "likelihood", str, "how the policy picks an option", MODES),
)
KEYS = {k.name: k for k in SCHEMA}
_SEED_TAGS = {"world.seed": 1, "data.seed": 2, "bench.seed": 3, "policy.seed": 4,
              "sft.seed": 5, "rft.seed": 6}


def _parse(key: Key, raw: Any) -> Any:
    if not isinstance(raw, str):
        value = raw
    elif key.kind is bool:
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key.name}: expected a boolean (true/false), got {raw!r}")
        value = low in ("true", "1", "yes")
    else:
        try:
            value = key.kind(raw.strip())
        except ValueError:
            raise ConfigError(f"{key.name}: expected {key.kind.__name__}, got {raw!r}") from None
    if key.kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, key.kind) or (key.kind is int and isinstance(value, bool)):
        raise ConfigError(f"{key.name}: expected {key.kind.__name__}, got {value!r}")
    if key.choices and value not in key.choices:
        raise ConfigError(f"{key.name}: {value!r} is not one of {', '.join(key.choices)}")
    return value


class ExperimentConfig(Mapping[str, Any]):
    """Resolved configuration (defaults + overrides)."""

    def __init__(self, overrides: Mapping[str, Any] | None = None):
        self._values = {k.name: k.default for k in SCHEMA}
        for name, raw in (overrides or {}).items():
            if name not in KEYS:
                raise ConfigError(f"unknown config key {name!r}; accepted keys: {', '.join(KEYS)}")
            self._values[name] = _parse(KEYS[name], raw)

    def __getitem__(self, name: str) -> Any:
        return self._values[name]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def replace(self, **changes: Any) -> "ExperimentConfig":
        merged = dict(self._values)
        merged.update({k.replace("__", "."): v for k, v in changes.items()})
        return ExperimentConfig(merged)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        merged = dict(self._values)
        merged.update(overrides)
        return ExperimentConfig(merged)

    def seed_for(self, name: str) -> int:
        value = self._values[name]
        if value >= 0:
            return value
        return self._values["seed"] * 1000 + _SEED_TAGS[name]

    def dumps(self) -> str:
        lines = []
        for k in SCHEMA:
            v = self._values[k.name]
            lines.append(f"{k.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}; accepted keys: {', '.join(KEYS)}")
        out[key] = value
    return out


def load_config(path: str | Path | None = None,
                overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    values: dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_lines(fh, str(path)))
    values.update(overrides or {})
    return ExperimentConfig(values)


def describe() -> str:
    """Key listing with defaults, for ``--help``."""
    rows = []
    for k in SCHEMA:
        default = str(k.default).lower() if isinstance(k.default, bool) else k.default
        extra = f" [{'|'.join(k.choices)}]" if k.choices else ""
        rows.append(f"  {k.name} = {default}{extra}\n      {k.doc}")
    return "\n".join(rows)
