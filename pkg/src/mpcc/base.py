"""Base policy: the stand-in for a generically pretrained model.

Fine-tuning strategies all start from the same base.  The base has seen a
generic co-occurrence corpus (one cue, then an object that co-occurs with it,
then ``<eos>``) so it carries single-cue commonsense but neither the response
format nor how several cues combine.  ``init = uniform`` skips pretraining.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tokens as T
from .config import CORPORA as CORPUS_NAMES, INITS
from .errors import ConfigError
from .policy import PolicyParams, init_policy
from .sft import SftConfig, SftExample, train_sft
from .world import MaskedQuery, WorldModel, sample_scene, serialize_prompt


@dataclass(frozen=True)
class BaseConfig:
    init: str = "base"
    corpus: str = "cue"
    embed_dim: int = 32
    hidden_dim: int = 128
    context: int = 4
    max_len: int = 32
    pretrain_examples: int = 3000
    pretrain_steps: int = 1000
    pretrain_step_size: float = 0.5
    seed: int = 0


def cooccurrence(world: WorldModel) -> np.ndarray:
    """(M, K) table of p(cue appears, target) under the world's generative story."""
    co = np.zeros((len(world.cue_vocab), world.n_objects))
    pf = 1.0 / len(world.families)
    for fam in world.families:
        for combo, pc, pt in zip(fam.cue_combos, fam.combo_probs, fam.target_probs):
            co[list(combo)] += pf * pc * pt
    return co


def pretraining_corpus(world: WorldModel, n: int, rng: np.random.Generator) -> list[SftExample]:
    """Single-cue prompts with an object drawn from p(object | cue)."""
    co = cooccurrence(world)
    mass = co.sum(axis=1)
    live = np.flatnonzero(mass > 0)
    cue_p = mass[live] / mass[live].sum()
    out = []
    for i in range(n):
        c = int(live[rng.choice(len(live), p=cue_p)])
        p = co[c] / mass[c]
        o = world.object_vocab[int(rng.choice(world.n_objects, p=p))]
        attrs = (world.positions[rng.integers(len(world.positions))],
                 world.sizes[rng.integers(len(world.sizes))])
        q = MaskedQuery(f"pre{i}", serialize_prompt((world.cue_vocab[c],), attrs), o, "easy", p)
        out.append(SftExample(q, (o, T.EOS)))
    return out


def family_corpus(world: WorldModel, n: int, rng: np.random.Generator) -> list[SftExample]:
    """Full scenes with an object drawn from the scene family's marginal p(object | family)."""
    out = []
    for i in range(n):
        scene = sample_scene(world, rng)
        fam = world.families[[f.family_id for f in world.families].index(scene.family_id)]
        p = fam.combo_probs @ fam.target_probs
        o = world.object_vocab[int(rng.choice(world.n_objects, p=p))]
        q = MaskedQuery(f"pre{i}", serialize_prompt(scene.cues, scene.attributes), o, "easy", p)
        out.append(SftExample(q, (o, T.EOS)))
    return out


CORPORA = {"cue": pretraining_corpus, "family": family_corpus}


def build_base(world: WorldModel, config: BaseConfig | None = None) -> PolicyParams:
    config = config or BaseConfig()
    if config.init not in INITS:
        raise ConfigError(f"unknown policy init {config.init!r}; expected one of {', '.join(INITS)}")
    if config.corpus not in CORPUS_NAMES:
        raise ConfigError(f"unknown pretraining corpus {config.corpus!r}; "
                          f"expected one of {', '.join(CORPUS_NAMES)}")
    params = init_policy(world.vocab, embed_dim=config.embed_dim, hidden_dim=config.hidden_dim,
                         context=config.context, max_len=config.max_len, seed=config.seed,
                         uniform=config.init != "random")
    if config.init != "base":
        return params
    rng = np.random.default_rng([config.seed, 17])
    corpus = CORPORA[config.corpus](world, config.pretrain_examples, rng)
    sft = SftConfig(steps=config.pretrain_steps, step_size=config.pretrain_step_size, seed=config.seed)
    return train_sft(params, corpus, sft).params
