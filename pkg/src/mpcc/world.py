"""Synthetic masked-scene world with an exact posterior oracle.

A scene is a set of context cues drawn from one of several scene families plus
the position/size bins of a masked region. The masked object is drawn from a
family-specific conditional distribution given the cues, so the Bayes answer
``p(object | cues, attributes)`` is computable by enumeration.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tokens as T
from .errors import ConfigError, GenerationError, InputError

OBJECT_NAMES = (
    "cup", "fork", "knife", "spoon", "bowl", "plate", "pot", "pan",
    "kettle", "toaster", "oven", "sink", "apple", "banana", "orange", "carrot",
    "pizza", "donut", "cake", "sandwich", "bottle", "glass", "chair", "couch",
    "bed", "pillow", "lamp", "clock", "vase", "book", "laptop", "mouse",
    "keyboard", "remote", "phone", "television", "umbrella", "backpack", "handbag", "suitcase",
    "tie", "scissors", "toothbrush", "towel", "soap", "mirror", "bicycle", "car",
    "bus", "train", "truck", "boat", "kite", "frisbee", "skateboard", "surfboard",
    "ball", "bat", "glove", "bench", "hydrant", "sign", "meter", "bird",
)
POSITIONS = ("left", "center", "right")
SIZES = ("small", "medium", "large")

DIFFICULTIES = ("easy", "moderate", "hard")


@dataclass(frozen=True)
class WorldConfig:
    n_objects: int = 24
    n_cues: int = 48
    n_families: int = 6
    combos_per_family: int = 8
    min_cues: int = 2
    max_cues: int = 3
    family_support: int = 9
    # fractions of cue combinations with 1, 2-3 and 4-6 candidate targets
    support_mix: tuple[float, float, float] = (0.4, 0.35, 0.25)
    shared_combo_prob: float = 0.15
    attribute_effects: bool = False

    def validate(self) -> None:
        if self.n_objects < 4:
            raise ConfigError(f"n_objects must be >= 4, got {self.n_objects}")
        if self.n_cues < 8:
            raise ConfigError(f"n_cues must be >= 8, got {self.n_cues}")
        if self.n_families < 3:
            raise ConfigError(f"n_families must be >= 3, got {self.n_families}")
        if self.n_cues < 2 * self.n_families:
            raise ConfigError(
                f"n_cues must be >= 2 * n_families ({2 * self.n_families}), got {self.n_cues}")
        if self.combos_per_family < 1:
            raise ConfigError(f"combos_per_family must be >= 1, got {self.combos_per_family}")
        if not 1 <= self.min_cues <= self.max_cues:
            raise ConfigError(f"min_cues/max_cues must satisfy 1 <= min <= max, "
                              f"got {self.min_cues}/{self.max_cues}")
        if self.family_support < 1:
            raise ConfigError(f"family_support must be >= 1, got {self.family_support}")
        mix = np.asarray(self.support_mix, dtype=float)
        if mix.shape != (3,) or np.any(mix < 0) or mix.sum() <= 0:
            raise ConfigError(f"support_mix must be three nonnegative weights, got {self.support_mix}")
        if not 0.0 <= self.shared_combo_prob <= 1.0:
            raise ConfigError(f"shared_combo_prob must lie in [0, 1], got {self.shared_combo_prob}")


@dataclass(frozen=True)
class DifficultyThresholds:
    """Posterior-entropy cut points in bits."""

    easy_max: float = 0.5
    moderate_max: float = 1.5
    filter_max: float = 2.5

    def classify(self, entropy_bits: float) -> str | None:
        if entropy_bits > self.filter_max:
            return None
        if entropy_bits < self.easy_max:
            return "easy"
        if entropy_bits < self.moderate_max:
            return "moderate"
        return "hard"


@dataclass(eq=False)
class SceneFamily:
    family_id: str
    cue_combos: tuple[tuple[int, ...], ...]
    combo_probs: np.ndarray          # (C,)  the cue distribution
    target_probs: np.ndarray         # (C, K) p(target | cue combination)
    irrelevant_set: tuple[int, ...]
    attribute_table: np.ndarray | None = None  # (K, P, S), normalised per object

    def support(self) -> set[int]:
        return set(np.flatnonzero(self.target_probs.sum(axis=0) > 0).tolist())


@dataclass(eq=False)
class WorldModel:
    object_vocab: tuple[str, ...]
    cue_vocab: tuple[str, ...]
    positions: tuple[str, ...]
    sizes: tuple[str, ...]
    families: tuple[SceneFamily, ...]
    rng_seed: int = 0

    @property
    def n_objects(self) -> int:
        return len(self.object_vocab)

    @cached_property
    def object_index(self) -> dict[str, int]:
        return {o: i for i, o in enumerate(self.object_vocab)}

    @cached_property
    def cue_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.cue_vocab)}

    @cached_property
    def combo_index(self) -> dict[tuple[int, ...], list[tuple[int, int]]]:
        """cue combination -> [(family index, combo index)]"""
        index: dict[tuple[int, ...], list[tuple[int, int]]] = {}
        for f, fam in enumerate(self.families):
            for c, combo in enumerate(fam.cue_combos):
                index.setdefault(combo, []).append((f, c))
        return index

    @cached_property
    def vocab(self) -> tuple[str, ...]:
        return T.build_vocab(self.object_vocab, self.cue_vocab, self.positions, self.sizes)

    def check(self) -> None:
        """Raise ``InputError`` if any structural invariant is violated."""
        if len(set(self.object_vocab)) != len(self.object_vocab):
            raise InputError("object_vocab entries are not unique")
        if len(set(self.cue_vocab)) != len(self.cue_vocab):
            raise InputError("cue_vocab entries are not unique")
        K, M = len(self.object_vocab), len(self.cue_vocab)
        for fam in self.families:
            if not fam.cue_combos:
                raise InputError(f"family {fam.family_id} has no cue combinations")
            for combo in fam.cue_combos:
                if not combo or any(not 0 <= c < M for c in combo):
                    raise InputError(f"family {fam.family_id} has an invalid cue combination {combo}")
            if abs(fam.combo_probs.sum() - 1.0) > 1e-9:
                raise InputError(f"family {fam.family_id} cue distribution does not sum to 1")
            if fam.target_probs.shape != (len(fam.cue_combos), K):
                raise InputError(f"family {fam.family_id} target table has wrong shape")
            if np.any(np.abs(fam.target_probs.sum(axis=1) - 1.0) > 1e-9):
                raise InputError(f"family {fam.family_id} target distribution does not sum to 1")
            if fam.support() & set(fam.irrelevant_set):
                raise InputError(f"family {fam.family_id} irrelevant set overlaps its support")


@dataclass(frozen=True)
class Scene:
    family_id: str
    cues: tuple[str, ...]
    attributes: tuple[str, str]      # (position bin, size bin)
    target: str


@dataclass(frozen=True, eq=False)
class MaskedQuery:
    query_id: str
    prompt_tokens: tuple[str, ...]
    gold: str
    difficulty: str
    posterior: np.ndarray            # over object_vocab
    scene_ref: Scene | None = None

    @property
    def entropy_bits(self) -> float:
        return entropy_bits(self.posterior)

    def context(self) -> tuple[tuple[str, ...], tuple[str, str]]:
        """(cues, (position, size)) recovered from the prompt."""
        return parse_prompt(self.prompt_tokens)


@dataclass(frozen=True)
class Rejection:
    scene: Scene
    entropy_bits: float
    reason: str = "weak contextual association"


@dataclass(frozen=True)
class ThinkTrace:
    tokens: tuple[str, ...]
    counter_oracle: bool = False
    template_version: int = 1

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


# --------------------------------------------------------------------------- #
# world construction

def build_world(config: WorldConfig | None = None, seed: int = 0) -> WorldModel:
    config = config or WorldConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    K, M, F = config.n_objects, config.n_cues, config.n_families

    objects = tuple(OBJECT_NAMES[i] if i < len(OBJECT_NAMES) else f"object{i}" for i in range(K))
    cues = tuple(f"c{i:03d}" for i in range(M))

    cue_perm = rng.permutation(M)
    pools = np.array_split(cue_perm, F)
    support_size = min(config.family_support, max(1, K - 2))
    mix = np.asarray(config.support_mix, dtype=float)
    mix = mix / mix.sum()

    families: list[SceneFamily] = []
    all_combos: list[tuple[int, ...]] = []
    for f in range(F):
        pool = sorted(int(c) for c in pools[f])
        sizes = [s for s in range(config.min_cues, config.max_cues + 1) if s <= len(pool)] or [len(pool)]
        candidates = [c for s in sizes for c in itertools.combinations(pool, s)]
        n_combos = min(config.combos_per_family, len(candidates))
        pick = rng.choice(len(candidates), size=n_combos, replace=False)
        combos = [candidates[i] for i in sorted(pick)]
        # borrow a few combinations from earlier families to create cross-family ambiguity
        for c in range(n_combos):
            if all_combos and rng.random() < config.shared_combo_prob:
                borrowed = all_combos[rng.integers(len(all_combos))]
                if borrowed not in combos:
                    combos[c] = borrowed
        all_combos.extend(combos)

        family_objects = np.sort(rng.choice(K, size=support_size, replace=False))
        combo_probs = rng.dirichlet(np.full(n_combos, 2.0))
        target_probs = np.zeros((n_combos, K))
        for c in range(n_combos):
            band = rng.choice(3, p=mix)
            if band == 0:
                n_t = 1
            elif band == 1:
                n_t = int(rng.integers(2, 4))
            else:
                n_t = int(rng.integers(4, 7))
            n_t = min(n_t, support_size)
            chosen = rng.choice(family_objects, size=n_t, replace=False)
            probs = np.sort(rng.dirichlet(np.full(n_t, 1.5)))[::-1] if n_t > 1 else np.ones(1)
            target_probs[c, chosen] = probs
        irrelevant = tuple(int(o) for o in range(K) if o not in set(family_objects.tolist()))
        table = None
        if config.attribute_effects:
            table = rng.gamma(2.0, size=(K, len(POSITIONS), len(SIZES)))
            table /= table.sum(axis=(1, 2), keepdims=True)
        families.append(SceneFamily(
            family_id=f"f{f}",
            cue_combos=tuple(combos),
            combo_probs=combo_probs,
            target_probs=target_probs,
            irrelevant_set=irrelevant,
            attribute_table=table,
        ))

    world = WorldModel(objects, cues, POSITIONS, SIZES, tuple(families), rng_seed=seed)
    world.check()
    return world


# --------------------------------------------------------------------------- #
# sampling and the oracle

def sample_scene(world: WorldModel, rng: np.random.Generator,
                 families: Sequence[int] | None = None) -> Scene:
    """Draw one scene; ``families`` optionally restricts the uniform family draw."""
    choices = range(len(world.families)) if families is None else families
    f = choices[int(rng.integers(len(choices)))]
    fam = world.families[f]
    c = int(rng.choice(len(fam.cue_combos), p=fam.combo_probs))
    target = int(rng.choice(world.n_objects, p=fam.target_probs[c]))
    P, S = len(world.positions), len(world.sizes)
    if fam.attribute_table is None:
        pos, size = int(rng.integers(P)), int(rng.integers(S))
    else:
        cell = int(rng.choice(P * S, p=fam.attribute_table[target].ravel()))
        pos, size = divmod(cell, S)
    return Scene(
        family_id=fam.family_id,
        cues=tuple(world.cue_vocab[i] for i in fam.cue_combos[c]),
        attributes=(world.positions[pos], world.sizes[size]),
        target=world.object_vocab[target],
    )


def _resolve_context(world: WorldModel, cues: Iterable[str],
                     attributes: Sequence[str] | None) -> tuple[tuple[int, ...], tuple[int, int] | None]:
    idx = []
    for c in cues:
        if c not in world.cue_index:
            raise InputError(f"unknown cue token {c!r}")
        idx.append(world.cue_index[c])
    attr = None
    if attributes is not None:
        pos, size = attributes
        if pos not in world.positions or size not in world.sizes:
            raise InputError(f"unknown attribute bins {tuple(attributes)!r}")
        attr = (world.positions.index(pos), world.sizes.index(size))
    return tuple(sorted(idx)), attr


def joint_table(world: WorldModel, cues: Iterable[str],
                attributes: Sequence[str] | None = None) -> np.ndarray:
    """Unnormalised ``p(family, cues, attributes, object)`` as an (F, K) array."""
    combo, attr = _resolve_context(world, cues, attributes)
    F = len(world.families)
    joint = np.zeros((F, world.n_objects))
    for f, c in world.combo_index.get(combo, ()):
        fam = world.families[f]
        row = fam.combo_probs[c] * fam.target_probs[c] / F
        if attr is not None and fam.attribute_table is not None:
            row = row * fam.attribute_table[:, attr[0], attr[1]]
        elif attr is not None:
            row = row / (len(world.positions) * len(world.sizes))
        joint[f] += row
    return joint


def oracle_posterior(world: WorldModel, cues: Iterable[str],
                     attributes: Sequence[str] | None = None) -> np.ndarray:
    """Exact Bayes posterior over ``world.object_vocab``."""
    joint = joint_table(world, cues, attributes)
    total = joint.sum()
    if total <= 0:
        raise InputError(f"cue combination {tuple(cues)!r} has zero probability in this world")
    return joint.sum(axis=0) / total


def family_posterior(world: WorldModel, cues: Iterable[str],
                     attributes: Sequence[str] | None = None) -> np.ndarray:
    joint = joint_table(world, cues, attributes)
    total = joint.sum()
    if total <= 0:
        raise InputError(f"cue combination {tuple(cues)!r} has zero probability in this world")
    return joint.sum(axis=1) / total


def entropy_bits(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def argmax_lowest(p: Sequence[float]) -> int:
    # np.argmax returns the first maximal index
    return int(np.argmax(np.asarray(p)))


# --------------------------------------------------------------------------- #
# queries

def serialize_prompt(cues: Sequence[str], attributes: Sequence[str]) -> tuple[str, ...]:
    return tuple([T.cue_token(c) for c in cues]
                 + [T.pos_token(attributes[0]), T.size_token(attributes[1]), T.MASK])


def parse_prompt(prompt_tokens: Sequence[str]) -> tuple[tuple[str, ...], tuple[str, str]]:
    cues, pos, size = [], None, None
    for tok in prompt_tokens:
        if tok.startswith("CUE:"):
            cues.append(tok[4:])
        elif tok.startswith("POS:"):
            pos = tok[4:]
        elif tok.startswith("SIZE:"):
            size = tok[5:]
        elif tok != T.MASK:
            raise InputError(f"unexpected prompt token {tok!r}")
    if pos is None or size is None or list(prompt_tokens).count(T.MASK) != 1:
        raise InputError(f"malformed prompt {' '.join(prompt_tokens)!r}")
    return tuple(cues), (pos, size)


def make_masked_query(world: WorldModel, scene: Scene, query_id: str = "",
                      thresholds: DifficultyThresholds | None = None) -> MaskedQuery | Rejection:
    thresholds = thresholds or DifficultyThresholds()
    posterior = oracle_posterior(world, scene.cues, scene.attributes)
    h = entropy_bits(posterior)
    difficulty = thresholds.classify(h)
    if difficulty is None:
        return Rejection(scene, h)
    return MaskedQuery(
        query_id=query_id,
        prompt_tokens=serialize_prompt(scene.cues, scene.attributes),
        gold=scene.target,
        difficulty=difficulty,
        posterior=posterior,
        scene_ref=scene,
    )


def filter_scenes(world: WorldModel, scenes: Sequence[Scene],
                  thresholds: DifficultyThresholds | None = None,
                  id_prefix: str = "q") -> list[MaskedQuery]:
    out = []
    for i, scene in enumerate(scenes):
        q = make_masked_query(world, scene, f"{id_prefix}{i:06d}", thresholds)
        if isinstance(q, MaskedQuery):
            out.append(q)
    return out


def generate_queries(world: WorldModel, n: int, rng: np.random.Generator,
                     thresholds: DifficultyThresholds | None = None,
                     families: Sequence[int] | None = None,
                     difficulties: Sequence[str] | None = None,
                     id_prefix: str = "q", max_tries: int | None = None) -> list[MaskedQuery]:
    """Sample scenes until ``n`` accepted queries (optionally of given difficulties) exist."""
    max_tries = max_tries if max_tries is not None else 200 * n + 1000
    out: list[MaskedQuery] = []
    tries = 0
    while len(out) < n:
        if tries >= max_tries:
            raise GenerationError(f"only {len(out)} of {n} queries accepted after {tries} scenes")
        scene = sample_scene(world, rng, families)
        q = make_masked_query(world, scene, f"{id_prefix}{tries:06d}", thresholds)
        tries += 1
        if isinstance(q, MaskedQuery) and (difficulties is None or q.difficulty in difficulties):
            out.append(q)
    return out


# --------------------------------------------------------------------------- #
# reasoning traces

def _likelihood_word(p: float) -> str:
    if p >= 0.6:
        return "likely"
    if p >= 0.25:
        return "possible"
    return "unlikely"


def top_candidates(posterior: np.ndarray, n: int = 3) -> list[int]:
    """Indices of the ``n`` most probable live objects, ties by lowest index."""
    order = np.lexsort((np.arange(len(posterior)), -posterior))
    return [int(i) for i in order[:n] if posterior[i] > 0]


def synthesize_think_trace(world: WorldModel, query: MaskedQuery) -> ThinkTrace:
    cues, (pos, size) = query.context()
    posterior = query.posterior
    toks: list[str] = ["see"] + [T.cue_token(c) for c in cues]
    toks += ["region", T.pos_token(pos), T.size_token(size), "candidates"]
    for i in top_candidates(posterior):
        toks += [world.object_vocab[i], _likelihood_word(float(posterior[i]))]
    toks += ["conclude", query.gold]
    best = world.object_vocab[argmax_lowest(posterior)]
    return ThinkTrace(tuple(toks), counter_oracle=(best != query.gold))


# --------------------------------------------------------------------------- #
# persistence

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def posterior_to_dict(world: WorldModel, posterior: np.ndarray) -> dict[str, float]:
    return {world.object_vocab[i]: float(posterior[i]) for i in np.flatnonzero(posterior)}


def query_record(world: WorldModel, query: MaskedQuery, think: ThinkTrace | None = None) -> dict:
    rec = {
        "id": query.query_id,
        "prompt": " ".join(query.prompt_tokens),
        "gold": query.gold,
        "difficulty": query.difficulty,
        "posterior": posterior_to_dict(world, query.posterior),
    }
    if think is not None:
        rec["think"] = think.text
    return rec


def write_queries_jsonl(path: str | Path, world: WorldModel, queries: Sequence[MaskedQuery],
                        thinks: Sequence[ThinkTrace | None] | None = None) -> None:
    thinks = thinks if thinks is not None else [None] * len(queries)
    with open(path, "w", encoding="utf-8") as fh:
        for q, t in zip(queries, thinks):
            fh.write(_dumps(query_record(world, q, t)) + "\n")


def read_queries_jsonl(path: str | Path, world: WorldModel) -> list[tuple[MaskedQuery, str | None]]:
    """Returns ``(query, think_text_or_None)`` pairs."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = {"id", "prompt", "gold", "difficulty", "posterior"} - rec.keys()
            if missing:
                raise InputError(f"{path}:{line_no}: missing fields {sorted(missing)}")
            post = np.zeros(world.n_objects)
            for name, p in rec["posterior"].items():
                if name not in world.object_index:
                    raise InputError(f"{path}:{line_no}: unknown object {name!r}")
                post[world.object_index[name]] = p
            q = MaskedQuery(rec["id"], tuple(rec["prompt"].split()), rec["gold"],
                            rec["difficulty"], post)
            out.append((q, rec.get("think")))
    return out


def world_to_dict(world: WorldModel) -> dict:
    return {
        "rng_seed": world.rng_seed,
        "object_vocab": list(world.object_vocab),
        "cue_vocab": list(world.cue_vocab),
        "positions": list(world.positions),
        "sizes": list(world.sizes),
        "families": [
            {
                "family_id": fam.family_id,
                "cue_combos": [list(c) for c in fam.cue_combos],
                "combo_probs": fam.combo_probs.tolist(),
                "target_given_cues": [
                    {world.object_vocab[o]: float(row[o]) for o in np.flatnonzero(row)}
                    for row in fam.target_probs
                ],
                "irrelevant_set": [world.object_vocab[o] for o in fam.irrelevant_set],
                "attribute_table": None if fam.attribute_table is None else fam.attribute_table.tolist(),
            }
            for fam in world.families
        ],
    }


def world_from_dict(d: dict) -> WorldModel:
    objects = tuple(d["object_vocab"])
    index = {o: i for i, o in enumerate(objects)}
    fams = []
    for fd in d["families"]:
        tp = np.zeros((len(fd["cue_combos"]), len(objects)))
        for c, row in enumerate(fd["target_given_cues"]):
            for name, p in row.items():
                tp[c, index[name]] = p
        table = fd.get("attribute_table")
        fams.append(SceneFamily(
            family_id=fd["family_id"],
            cue_combos=tuple(tuple(c) for c in fd["cue_combos"]),
            combo_probs=np.asarray(fd["combo_probs"], dtype=float),
            target_probs=tp,
            irrelevant_set=tuple(index[o] for o in fd["irrelevant_set"]),
            attribute_table=None if table is None else np.asarray(table, dtype=float),
        ))
    world = WorldModel(objects, tuple(d["cue_vocab"]), tuple(d["positions"]), tuple(d["sizes"]),
                       tuple(fams), rng_seed=int(d["rng_seed"]))
    world.check()
    return world


def entropy_nats(p: np.ndarray) -> float:
    return entropy_bits(p) * math.log(2)
