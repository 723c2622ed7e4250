"""Masked-scene context completion: a desk-scale reinforcement fine-tuning lab.

Modules: :mod:`world` (synthetic scenes and exact oracle), :mod:`policy` (tiny
autoregressive policy), :mod:`reward` (verifiable reward), :mod:`sft`,
:mod:`grpo` (group-relative RL, with prior sampling), :mod:`bench` (choice
benchmark) and :mod:`pipeline` / :mod:`cli` (experiment lifecycle).
"""

__version__ = "0.1.0"
