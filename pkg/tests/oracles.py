"""Independent reference computations used by the tests.

Nothing here imports the solvers under test; each oracle is a direct,
slow transcription of a definition.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from mdrl.pmomdp import DomainSpec, MultiDomainMDP


def random_mdp(rng: np.random.Generator, max_states: int = 5, max_actions: int = 3,
               n_domains: int = 2, gamma: float = 0.9) -> MultiDomainMDP:
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    doms = tuple(DomainSpec(np.array([float(k)]), rng.dirichlet(np.ones(S), size=(S, A)),
                            rng.uniform(-1, 1, (S, A))) for k in range(n_domains))
    return MultiDomainMDP(S, A, doms, gamma)


def value_iteration(P: np.ndarray, R: np.ndarray, gamma: float, tol: float = 1e-13) -> np.ndarray:
    """Plain (hard-max) optimal state values of one domain by loops."""
    S, A = R.shape
    V = np.zeros(S)
    while True:
        Vn = np.array([max(R[s, a] + gamma * sum(P[s, a, t] * V[t] for t in range(S)) for a in range(A))
                       for s in range(S)])
        if np.max(np.abs(Vn - V)) < tol:
            return Vn
        V = Vn


def soft_value_iteration(P, R, gamma, alpha, tol=1e-13):
    S, A = R.shape
    V = np.zeros(S)
    while True:
        Q = R + gamma * P @ V
        m = Q.max(axis=1)
        Vn = m + alpha * np.log(np.exp((Q - m[:, None]) / alpha).sum(axis=1))
        if np.max(np.abs(Vn - V)) < tol:
            return Q, Vn
        V = Vn


def dominance_pcs(V) -> list[int]:
    n = len(V)
    keep = []
    for i in range(n):
        dominated = False
        for j in range(n):
            if all(V[j][k] >= V[i][k] for k in range(len(V[i]))) and \
                    any(V[j][k] > V[i][k] for k in range(len(V[i]))):
                dominated = True
                break
        if not dominated:
            keep.append(i)
    return keep


def hull_ccs_2d(V) -> list[int]:
    """Exact CCS for two objectives in rational arithmetic.

    ``p`` belongs when it is non-dominated and the set of weights
    ``t in [0, 1]`` with ``(t, 1-t) . (p - q) >= 0`` for every ``q`` is
    nonempty, i.e. ``p`` lies on the upper-right convex hull.
    """
    Q = [tuple(Fraction(float(x)) for x in v) for v in V]
    out = []
    for i in dominance_pcs(Q):
        lo, hi = Fraction(0), Fraction(1)
        p = Q[i]
        for q in Q:
            c = p[1] - q[1]
            m = (p[0] - q[0]) - c
            if m > 0:
                lo = max(lo, -c / m)
            elif m < 0:
                hi = min(hi, -c / m)
            elif c < 0:
                lo, hi = Fraction(1), Fraction(0)
        if lo <= hi:
            out.append(i)
    return out
