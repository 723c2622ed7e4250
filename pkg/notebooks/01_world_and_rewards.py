"""
The synthetic world, masked queries, rewards and benchmark questions
====================================================================

Run with ``python3 notebooks/01_world_and_rewards.py``.
"""
import numpy as np

from mpcc.bench import build_questions
from mpcc.reward import compute_reward, parse_response
from mpcc.world import (WorldConfig, build_world, generate_queries, posterior_to_dict,
                        synthesize_think_trace)

# A world is a set of scene families. Each family owns a pool of context cues
# and, for every cue combination, a distribution over the masked object.
world = build_world(WorldConfig(), seed=1)
print(f"{len(world.families)} families, {world.n_objects} objects, {len(world.cue_vocab)} cues, "
      f"vocabulary of {len(world.vocab)} tokens")

# A masked query shows the cues and the attributes of the hidden object.
# The exact Bayes posterior over objects sets its difficulty (entropy in bits).
queries = generate_queries(world, 300, np.random.default_rng(0))
counts = {d: sum(q.difficulty == d for q in queries) for d in ("easy", "moderate", "hard")}
print("difficulty mix:", counts)

q = next(q for q in queries if q.difficulty == "moderate")
print("\nprompt:", " ".join(q.prompt_tokens))
print("gold:", q.gold, f"(entropy {q.entropy_bits:.3f} bits)")
top = sorted(posterior_to_dict(world, q.posterior).items(), key=lambda kv: -kv[1])[:4]
print("posterior top-4:", ", ".join(f"{o} {p:.3f}" for o, p in top))

# The annotated reasoning trace names the cues and weighs the top candidates.
trace = synthesize_think_trace(world, q)
print("think trace:", " ".join(trace.tokens))

# Rewards: format + exact match + Levenshtein-ratio similarity, each in [0, 1].
for raw in (f"<think>{' '.join(trace.tokens)}</think><answer>{q.gold}</answer>",
            f"<think>guess</think><answer>{q.gold[:-1]}</answer>",
            q.gold,
            "<answer>x</answer><think>y</think>"):
    r = compute_reward(parse_response(raw), q.gold)
    print(f"  fmt={r.r_fmt:.0f} exact={r.r_exact:.0f} sim={r.r_sim:.3f} total={r.total:.3f}  <- {raw[:60]}")

# Each accepted query yields an EasyChoice (4 options) and a HardChoice (7 options)
# question. Confusing options are the next most probable objects; irrelevant ones
# are impossible in every family consistent with the cues.
for qu in build_questions(world, [q], seed=0):
    print(f"\n{qu.format}:")
    for i, o in enumerate(qu.options):
        mark = "*" if i == qu.correct_index else " "
        print(f"  {mark} {i} {o.text:<12} {o.kind}")
