"""Identify which chain you are in, exactly and with a learned ensemble.

Run: python3 demos/identify_domain.py
"""
from __future__ import annotations

import numpy as np

from mdrl.dp_solvers import solve
from mdrl.envs import build_two_domain_chain
from mdrl.harness import OSI_MODES, evaluate_with_osi, osi_tendency, rng_for, train_ensemble
from mdrl.osi import Posterior, bayes_filter_step, filter_rollouts
from mdrl.pmomdp import make_grid

mdp = build_two_domain_chain()
grid = make_grid(2)

# one step right from the left end: the low-slip chain is nine times likelier
post = bayes_filter_step(Posterior.uniform(2), mdp, 0, 1, 1)
print("belief after one successful move:", post.weights)

uniform = np.full((mdp.n_states, mdp.n_actions), 0.5)
for k in range(2):
    w = filter_rollouts(mdp, k, uniform, 500, 50, np.random.default_rng([7, k]))
    print(f"domain {k}: {np.mean((w >= 0.99).any(axis=1)):.1%} of walks reach 0.99 within 50 steps")

# deploy the universal policy with a fixed, an exact and a learned belief
policy = solve("cmdrl", mdp, grid).policy
osi, _ = train_ensemble(mdp, 5000, rng_for(0, 99), epochs=10)
by_mode = {m: evaluate_with_osi(policy, grid, mdp, m, 200, rng_for(0, i), 50, osi)
           for i, m in enumerate(OSI_MODES)}
for mode, eps in by_mode.items():
    print(f"{mode:12s} mean return {np.mean([e.ret for e in eps]):.4f}")
print("domains improved / worsened vs fixed belief:", osi_tendency(by_mode))
