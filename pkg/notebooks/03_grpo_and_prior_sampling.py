"""
Group-relative RFT and prior sampling
=====================================

Plain GRPO only reinforces what the policy already samples. The base never
writes the <think>/<answer> tags, so the format reward is never earned and never
learned. Prior sampling puts an annotated trajectory into one slot of the group;
its high reward gives it a positive advantage and pulls the policy toward the format.

Run with ``python3 notebooks/03_grpo_and_prior_sampling.py`` (``--quick`` for a short run).
"""
import sys

import numpy as np

from mpcc.base import BaseConfig
from mpcc.experiments import annotated_dataset, easy_dataset, replicate, steps_to_format
from mpcc.grpo import RftConfig, train_rft

quick = "--quick" in sys.argv
rep = replicate(0, BaseConfig(pretrain_steps=50, embed_dim=8, hidden_dim=16) if quick else None)
steps = 40 if quick else 600

# Plain GRPO on easy queries: the exact-match rate climbs from what the base
# already knows.
res = train_rft(rep.base, [(q, None) for q in easy_dataset(rep)], RftConfig(steps=steps, seed=0))
print("plain GRPO on easy queries")
for s in range(0, steps, max(1, steps // 6)):
    window = res.metrics[s:s + 20]
    print(f"  steps {s:>4}-{s + len(window) - 1:<4} exact {np.mean([m['mean_exact'] for m in window]):.3f} "
          f"skipped groups {np.mean([m['frac_skipped'] for m in window]):.2f}")

# Same data, same seeds: which strategy learns the response format first?
data = annotated_dataset(rep)
for prior in (True, False):
    n, rows = steps_to_format(rep.base, data, RftConfig(steps=steps, seed=0, prior_sampling=prior))
    label = "rft+prior" if prior else "rft      "
    reached = f"reached 0.9 after {n} steps" if n else f"not reached in {len(rows)} steps"
    print(f"{label} format at step 0: {rows[0]['mean_fmt']:.2f}, last 20 steps: "
          f"{np.mean([r['mean_fmt'] for r in rows[-20:]]):.2f}; {reached}")
