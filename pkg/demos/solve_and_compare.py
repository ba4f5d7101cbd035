"""Solve the two-domain chain with every exact solver and compare them.

Run: python3 demos/solve_and_compare.py
"""
from __future__ import annotations

import warnings

import numpy as np

from mdrl.dp_solvers import ConvergenceWarning, hierarchy_report, solve_umdrl_v2, utopia_gap
from mdrl.envs import build_two_domain_chain
from mdrl.pmomdp import make_grid
from mdrl.utility import compute_ccs, compute_pcs, enumerate_policies_oracle

mdp = build_two_domain_chain()
grid = make_grid(2)

# every deterministic policy, and which of them any linear preference would pick
en = enumerate_policies_oracle(mdp)
pcs, ccs = compute_pcs(en.initial), compute_ccs(en.initial, grid)
print(f"{len(en)} deterministic policies, {len(pcs)} undominated, {len(ccs)} on the convex hull")
for i, v in zip(ccs.indices, ccs.values):
    print(f"  actions {en.actions[i]} -> values {np.round(v, 4)}")

# scalarized soft value of each solver's policy at every grid preference
with warnings.catch_warnings():
    warnings.simplefilter("ignore", ConvergenceWarning)
    rep = hierarchy_report(mdp, grid, check=False)
print("\nw0    " + "  ".join(f"{n:>8s}" for n in rep.solvers))
for c, w in enumerate(rep.cells):
    print(f"{w[0]:.1f}   " + "  ".join(f"{v:8.4f}" for v in rep.values[:, c]))
for note in rep.notes:
    print("note:", note)

v2 = solve_umdrl_v2(mdp, grid, tol=1e-12)
print(f"\nutopia bound slack (should be <= 0): {utopia_gap(mdp, v2):.2e}")
