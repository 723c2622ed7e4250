"""
The base policy and supervised fine-tuning on reasoning traces
==============================================================

Run with ``python3 notebooks/02_base_and_sft.py`` (add ``--quick`` for a short run).
"""
import sys

import numpy as np

from mpcc.base import BaseConfig, build_base
from mpcc.policy import sample_response
from mpcc.sft import SftConfig, make_example, mean_loss, train_sft
from mpcc.world import WorldConfig, build_world, generate_queries, synthesize_think_trace

quick = "--quick" in sys.argv
world = build_world(WorldConfig(), seed=1)
base_cfg = BaseConfig(pretrain_steps=50, embed_dim=8, hidden_dim=16) if quick else BaseConfig()

# The base stands in for a pretrained model: it has read a generic corpus of
# "cue -> co-occurring object" snippets, so it names plausible objects but has
# never seen the <think>/<answer> format or a full scene.
base = build_base(world, base_cfg)
queries = generate_queries(world, 200, np.random.default_rng(0))
q = queries[0]
print("prompt:", " ".join(q.prompt_tokens), "| gold:", q.gold)
print("base greedy:", " ".join(sample_response(base, q, greedy=True).response_tokens))

# SFT targets are the annotated trace followed by the tagged answer.
examples = [make_example(x, synthesize_think_trace(world, x)) for x in queries]
print("\nSFT target:", " ".join(examples[0].target_tokens))
cfg = SftConfig(steps=30 if quick else 1000)
res = train_sft(base, examples, cfg)
print(f"mean token NLL: base {mean_loss(base, examples):.3f} -> after {cfg.steps} steps "
      f"{mean_loss(res.params, examples):.3f}")
for step in range(0, len(res.losses), max(1, len(res.losses) // 5)):
    print(f"  step {step:>4}  batch loss {res.losses[step]:.3f}")

print("\nafter SFT:", " ".join(sample_response(res.params, q, greedy=True).response_tokens))
