"""
Comparing fine-tuning strategies in and out of distribution
===========================================================

Runs the whole pipeline (world, data, questions, every strategy on both splits)
into one output directory and prints the comparison table.

Run with ``python3 notebooks/04_strategy_table.py [out_dir]`` (``--quick`` for a short run).
"""
import sys

from mpcc import pipeline
from mpcc.config import STRATEGIES, ExperimentConfig

quick = "--quick" in sys.argv
args = [a for a in sys.argv[1:] if not a.startswith("--")]
out = args[0] if args else "runs/notebook"
over = {"out": out}
if quick:
    over.update({"data.train_scenes": 120, "data.eval_scenes": 90, "policy.embed_dim": 8,
                 "policy.hidden_dim": 16, "policy.pretrain_steps": 50, "sft.steps": 30, "rft.steps": 20})
cfg = ExperimentConfig(over)

for cmd in (pipeline.cmd_genworld, pipeline.cmd_gendata, pipeline.cmd_genbench):
    cmd(cfg)
for split in ("full", "ood"):
    for strategy in STRATEGIES:
        c = cfg.replace(strategy=strategy, train__split=split)
        pipeline.cmd_train(c)
        pipeline.cmd_eval(c)
        ev = pipeline.Manifest.open(c).data["evals"][f"{strategy}/{split}"]
        print(f"{split:<4} {strategy:<9} Ave Cho.E {ev['ave_e']:.2f}  Ave Cho.H {ev['ave_h']:.2f}")

# "prompt" is the base policy with the tag instruction prepended and no training.
print()
print(pipeline.cmd_report([out]))
print("per-cell tables (with random and oracle rows) are in", f"{out}/reports/")
