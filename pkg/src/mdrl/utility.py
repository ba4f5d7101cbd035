"""Linear scalarization, Pareto dominance and coverage sets."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .pmomdp import MultiDomainMDP, Preference, PreferenceGrid

ORACLE_CAP = 200_000


def _weights(pref) -> np.ndarray:
    if isinstance(pref, Preference):
        if not pref.is_discrete:
            raise ValueError("linear utility needs a discrete preference")
        return pref.weights
    return np.asarray(pref, dtype=float)


def linear_utility(v, pref) -> float:
    v, w = np.asarray(v, dtype=float), _weights(pref)
    if v.shape != w.shape:
        raise ValueError(f"length mismatch: {v.shape} vs {w.shape}")
    return float(v @ w)


def pareto_dominates(a, b) -> bool:
    """Weak Pareto dominance: ``a >= b`` everywhere and ``a > b`` somewhere."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a >= b) and np.any(a > b))


@dataclass
class CoverageSet:
    """Subset of candidate value vectors.

    ``indices`` point into the candidate list passed to the builder;
    ``witnesses`` holds, for CCS entries, a preference at which the entry is
    scalarized-optimal.
    """

    kind: str
    indices: list[int]
    values: np.ndarray
    witnesses: np.ndarray | None = None

    def __len__(self):
        return len(self.indices)

    def as_set(self, decimals: int = 12) -> set[tuple[float, ...]]:
        return {tuple(np.round(v, decimals)) for v in self.values}


def _as_matrix(values) -> np.ndarray:
    V = np.asarray(values, dtype=float)
    if V.ndim != 2 or len(V) == 0:
        raise ValueError("need a nonempty sequence of value vectors")
    return V


def compute_pcs(values: Sequence) -> CoverageSet:
    V = _as_matrix(values)
    ge = np.all(V[:, None, :] >= V[None, :, :], axis=-1)
    gt = np.any(V[:, None, :] > V[None, :, :], axis=-1)
    dominated = np.any(ge & gt, axis=0)  # column j dominated by some row i
    keep = np.flatnonzero(~dominated)
    return CoverageSet("PCS", keep.tolist(), V[keep])


def _breakpoint_preferences(V: np.ndarray) -> np.ndarray:
    """Tie weights of every candidate pair plus the midpoints between them.

    For two domains the maximizer of ``w V`` is constant between the weights
    at which two candidates tie, so the midpoints visit every linear piece
    of the envelope and the tie weights catch candidates that are optimal
    at a single weight only (collinear hull points).
    """
    d = V[:, 0] - V[:, 1]
    i, j = np.triu_indices(len(V), 1)
    num = V[j, 1] - V[i, 1]
    den = d[i] - d[j]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / den
    t = np.unique(t[np.isfinite(t) & (t > 0) & (t < 1)])
    pts = np.concatenate(([0.0], t, [1.0]))
    mids = (pts[:-1] + pts[1:]) / 2
    t = np.concatenate((pts, mids))
    return np.column_stack([t, 1 - t])


def compute_ccs(values: Sequence, grid: PreferenceGrid, refine: bool = True,
                atol: float = 1e-12) -> CoverageSet:
    """Members of the PCS that are scalarized-optimal at some evaluated preference.

    The evaluated preferences are the grid cells; with ``refine`` and two
    domains they also include one preference inside every linear piece of
    the optimal-value envelope, which makes membership exact.
    """
    V = _as_matrix(values)
    pcs = compute_pcs(V)
    P = pcs.values
    prefs = np.asarray(grid.cells, float)
    if prefs.shape[1] != V.shape[1]:
        raise ValueError("grid dimension does not match value vectors")
    if refine and V.shape[1] == 2 and len(P) > 1:
        prefs = np.vstack([prefs, _breakpoint_preferences(P)])
    scores = prefs @ P.T  # [n_prefs, n_pcs]
    best = scores.max(axis=1, keepdims=True)
    hit = scores >= best - atol * np.maximum(1.0, np.abs(best))
    members = np.flatnonzero(hit.any(axis=0))
    witness = prefs[np.argmax(hit[:, members], axis=0)]
    idx = [pcs.indices[m] for m in members]
    return CoverageSet("CCS", idx, V[idx], witness)


def optimal_scalarized_value(values: Sequence, pref) -> tuple[float, int]:
    V = _as_matrix(values)
    scores = V @ _weights(pref)
    k = int(np.argmax(scores))  # first maximum
    return float(scores[k]), k


def write_coverage_csv(cs: CoverageSet, path, policy_ids: Sequence | None = None) -> None:
    n = cs.values.shape[1]
    header = ["policy_id"] + [f"v{k}" for k in range(n)]
    if cs.witnesses is not None:
        header += [f"w{k}" for k in range(n)]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row, idx in enumerate(cs.indices):
            pid = policy_ids[idx] if policy_ids is not None else idx
            cells = [pid] + [f"{x:.8f}" for x in cs.values[row]]
            if cs.witnesses is not None:
                cells += [f"{x:.8f}" for x in cs.witnesses[row]]
            out.writerow(cells)


@dataclass
class PolicyEnumeration:
    """All deterministic stationary policies of a small MDP with exact values."""

    actions: np.ndarray      # [n_policies, S]
    values: np.ndarray       # [n_policies, K, S]
    initial: np.ndarray      # [n_policies, K], value at the initial distribution

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(zip(map(tuple, self.actions), self.initial))

    def best_per_domain(self) -> np.ndarray:
        return self.initial.max(axis=0)

    def optimal_policies(self, domain: int, atol: float = 1e-7) -> np.ndarray:
        """Policies whose value is maximal at every state in ``domain``."""
        Vd = self.values[:, domain, :]
        ok = np.all(Vd >= Vd.max(axis=0) - atol, axis=1)
        return self.actions[ok]


def enumerate_policies_oracle(mdp: MultiDomainMDP, cap: int = ORACLE_CAP,
                              chunk: int = 4096) -> PolicyEnumeration:
    S, A, K = mdp.n_states, mdp.n_actions, mdp.n_domains
    count = A ** S
    if count > cap:
        raise ValueError(f"{count} policies exceed the enumeration cap {cap}")
    acts = np.array(list(itertools.product(range(A), repeat=S)), dtype=int).reshape(count, S)
    P, R = mdp.P, mdp.R
    eye = np.eye(S)
    vals = np.empty((count, K, S))
    states = np.arange(S)
    for start in range(0, count, chunk):
        a = acts[start:start + chunk]
        P_pi = P[:, states[None, :], a]           # [K, n, S, S']
        r_pi = R[:, states[None, :], a]           # [K, n, S]
        sol = np.linalg.solve(eye - mdp.gamma * P_pi, r_pi[..., None])[..., 0]
        vals[start:start + chunk] = sol.transpose(1, 0, 2)
    return PolicyEnumeration(acts, vals, vals @ mdp.initial_dist)


def deterministic_policy(actions, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    return np.eye(n_actions)[actions]
