from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import dominance_pcs, hull_ccs_2d, value_iteration
from mdrl.envs import build_two_domain_chain
from mdrl.pmomdp import Preference, make_grid, single_cell_grid
from mdrl.utility import (compute_ccs, compute_pcs, enumerate_policies_oracle, linear_utility,
                          optimal_scalarized_value, pareto_dominates)

from mdrl.pmomdp import DomainSpec, MultiDomainMDP

CHAIN_BEST = 0.6345595  # frozen: best deterministic value at s0 in each chain domain

vectors = st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=1, max_size=25)


def test_linear_utility():
    assert linear_utility([5, 2], [0.5, 0.5]) == 3.5
    assert linear_utility([3, 3], [0.5, 0.5]) == 3.0
    assert linear_utility([7.0, -2.0], Preference.delta(1, 2)) == -2.0


def test_pareto_dominates():
    assert pareto_dominates([5, 4], [3, 3])
    assert not pareto_dominates([5, 2], [3, 3])
    assert not pareto_dominates([3, 3], [3, 3])


def test_pcs_examples():
    assert compute_pcs([[0, 1], [1, 0], [0.4, 0.4]]).indices == [0, 1, 2]
    assert compute_pcs([[1, 1], [0, 0]]).indices == [0]


def test_ccs_examples():
    grid = make_grid(2)
    assert compute_ccs([[0, 1], [1, 0], [0.4, 0.4]], grid).indices == [0, 1]
    assert compute_ccs([[0.2, 0.3]], grid).indices == [0]


def test_ccs_collinear_point_kept_off_grid():
    # [0.5, 0.5] is on the hull segment; only optimal at w = [0.5, 0.5], which
    # a grid without that cell misses, so the tie-weight refinement must find it
    V = [[1, 0], [0.5, 0.5], [0, 1]]
    assert compute_ccs(V, single_cell_grid([0.3, 0.7])).indices == [0, 1, 2]
    assert compute_ccs(V, single_cell_grid([0.3, 0.7]), refine=False).indices == [2]


def test_optimal_scalarized_value():
    assert optimal_scalarized_value([[5, 2], [3, 3]], [0.5, 0.5]) == (3.5, 0)
    assert optimal_scalarized_value([[0, 1], [1, 0]], Preference.delta(0, 2)) == (1.0, 1)


@settings(max_examples=60, deadline=None)
@given(vectors)
def test_pcs_matches_pairwise_oracle(v):
    assert compute_pcs(np.array(v, float)).indices == dominance_pcs(np.array(v, float))


@settings(max_examples=60, deadline=None)
@given(vectors)
def test_ccs_matches_hull_oracle(v):
    V = np.array(v, float)
    assert sorted(compute_ccs(V, make_grid(2)).indices) == hull_ccs_2d(V)


@settings(max_examples=40, deadline=None)
@given(vectors)
def test_ccs_subset_of_pcs_and_contains_every_maximizer(v):
    V = np.array(v, float)
    ccs = set(compute_ccs(V, make_grid(2)).indices)
    assert ccs <= set(compute_pcs(V).indices)
    for w in make_grid(2).cells:
        scores = V @ w
        winners = set(np.flatnonzero(scores == scores.max())) & set(compute_pcs(V).indices)
        assert winners <= ccs


def _single_state(n_actions):
    T = np.ones((1, n_actions, 1))
    R = np.arange(n_actions, dtype=float)[None]
    return MultiDomainMDP(1, n_actions, (DomainSpec([0.0], T, R),), 0.9)


def test_enumeration_counts():
    assert len(enumerate_policies_oracle(_single_state(3))) == 3
    T = np.zeros((2, 2, 2))
    T[:, :, 0] = 1
    two = MultiDomainMDP(2, 2, (DomainSpec([0.0], T, np.zeros((2, 2))),), 0.9)
    assert len(enumerate_policies_oracle(two)) == 4


def test_enumeration_cap():
    T = np.zeros((20, 2, 20))
    T[..., 0] = 1
    big = MultiDomainMDP(20, 2, (DomainSpec([0.0], T, np.zeros((20, 2))),), 0.9)
    with pytest.raises(ValueError):
        enumerate_policies_oracle(big)


def test_chain_best_per_domain_frozen():
    mdp = build_two_domain_chain()
    en = enumerate_policies_oracle(mdp)
    assert np.allclose(en.best_per_domain(), [CHAIN_BEST, CHAIN_BEST], atol=1e-7)
    for k in range(2):
        vi = value_iteration(mdp.P[k], mdp.R[k], mdp.gamma)
        assert abs(vi[0] - en.best_per_domain()[k]) < 1e-9
