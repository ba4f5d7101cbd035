"""Train the preference-conditioned soft actor-critic and compare with dynamic programming.

Run: python3 demos/train_tabular.py [steps]
"""
from __future__ import annotations

import sys

import numpy as np

from mdrl.dp_solvers import solve_cmdrl
from mdrl.envs import build_two_domain_chain
from mdrl.rl_loop import TrainConfig, run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 50_000
mdp = build_two_domain_chain()

dp = solve_cmdrl(mdp).scalarized_soft_values(mdp)
res = run_training(mdp, TrainConfig(total_steps=steps, variant="cmdsac", seed=0))
learned = res.scalarized_soft_values(mdp)

print(f"{steps} steps, {len(res.metrics)} episodes")
print("w0    DP       learned  rel.gap")
for w, a, b in zip(res.grid.cells, dp, learned):
    print(f"{w[0]:.1f}  {a:8.4f} {b:8.4f}  {abs(b - a) / abs(a):6.2%}")
tail = res.metrics[-50:]
print(f"mean return over the last 50 episodes: {np.mean([m['return'] for m in tail]):.4f}")
