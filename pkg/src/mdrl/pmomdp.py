"""Multi-domain MDP data model, preferences and exact policy evaluation.

A :class:`MultiDomainMDP` holds one transition kernel and reward table per
domain over shared state and action sets.  Values are always returned per
domain, so a policy's value is a vector with one entry per domain.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ROW_TOL = 1e-9


@dataclass(frozen=True)
class DomainSpec:
    """One randomized domain: parameters, kernel ``[S, A, S']`` and rewards ``[S, A]``."""

    kappa: np.ndarray
    transition: np.ndarray
    reward: np.ndarray

    def __post_init__(self):
        for name in ("kappa", "transition", "reward"):
            arr = np.array(getattr(self, name), dtype=float)
            arr = np.atleast_1d(arr) if name == "kappa" else arr
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class MultiDomainMDP:
    n_states: int
    n_actions: int
    domains: tuple[DomainSpec, ...]
    gamma: float
    initial_dist: np.ndarray = None
    eval_domains: tuple[DomainSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "eval_domains", tuple(self.eval_domains))
        if self.initial_dist is None:
            mu = np.zeros(self.n_states)
            mu[0] = 1.0
        else:
            mu = np.array(self.initial_dist, dtype=float)
        mu.setflags(write=False)
        object.__setattr__(self, "initial_dist", mu)

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def P(self) -> np.ndarray:
        """Stacked kernels, shape ``[K, S, A, S']``."""
        return np.stack([d.transition for d in self.domains])

    @property
    def R(self) -> np.ndarray:
        """Stacked rewards, shape ``[K, S, A]``."""
        return np.stack([d.reward for d in self.domains])

    @property
    def kappas(self) -> np.ndarray:
        return np.stack([d.kappa for d in self.domains])

    def with_domains(self, domains: Sequence[DomainSpec]) -> "MultiDomainMDP":
        return MultiDomainMDP(self.n_states, self.n_actions, tuple(domains),
                              self.gamma, self.initial_dist)

    def evaluation_view(self) -> "MultiDomainMDP":
        """The MDP restricted to its held-out evaluation domains (or itself)."""
        if not self.eval_domains:
            return self
        return self.with_domains(self.eval_domains)


# ---------------------------------------------------------------------------
# preferences


@dataclass(frozen=True)
class Preference:
    """Belief over domains.

    ``kind`` is ``"discrete"``, ``"delta"`` (one-hot discrete) or
    ``"uniform-box"`` (uniform distribution encoded by mean and std).
    """

    kind: str
    weights: np.ndarray | None = None
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("discrete", "delta", "uniform-box"):
            raise ValueError(f"unknown preference kind {self.kind!r}")
        for name in ("weights", "mu", "sigma"):
            val = getattr(self, name)
            if val is not None:
                arr = np.atleast_1d(np.array(val, dtype=float))
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if self.kind in ("discrete", "delta"):
            w = self.weights
            if w is None or np.any(w < 0) or abs(w.sum() - 1.0) > ROW_TOL:
                raise ValueError("discrete preference weights must be a probability vector")
            if self.kind == "delta" and not (np.sum(w == 1.0) == 1 and np.sum(w != 0) == 1):
                raise ValueError("delta preference must be one-hot")
        else:
            if self.mu is None or self.sigma is None or self.mu.shape != self.sigma.shape:
                raise ValueError("uniform-box preference needs mu and sigma of equal shape")
            if np.any(self.sigma < 0):
                raise ValueError("sigma must be nonnegative")

    @classmethod
    def discrete(cls, weights) -> "Preference":
        w = np.asarray(weights, dtype=float)
        if np.count_nonzero(w) == 1 and np.max(w) == 1.0:
            return cls("delta", weights=w)
        return cls("discrete", weights=w)

    @classmethod
    def delta(cls, index: int, n_domains: int) -> "Preference":
        w = np.zeros(n_domains)
        w[index] = 1.0
        return cls("delta", weights=w)

    @classmethod
    def uniform(cls, n_domains: int) -> "Preference":
        return cls.discrete(np.full(n_domains, 1.0 / n_domains))

    @classmethod
    def uniform_box(cls, mu, sigma, lo=None, hi=None) -> "Preference":
        """Uniform distribution with mean ``mu`` and std ``sigma``.

        When ``lo``/``hi`` are given the support ``mu +- sqrt(3) sigma`` must
        lie inside them.
        """
        pref = cls("uniform-box", mu=mu, sigma=sigma)
        if lo is not None and hi is not None:
            a, b = pref.support
            if np.any(a < np.asarray(lo) - 1e-12) or np.any(b > np.asarray(hi) + 1e-12):
                raise ValueError("uniform-box support leaves the randomization range")
        return pref

    @classmethod
    def from_bounds(cls, lo, hi) -> "Preference":
        lo, hi = np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))
        return cls("uniform-box", mu=(lo + hi) / 2, sigma=(hi - lo) / math.sqrt(12.0))

    @property
    def support(self) -> tuple[np.ndarray, np.ndarray]:
        half = math.sqrt(3.0) * self.sigma
        return self.mu - half, self.mu + half

    @property
    def is_discrete(self) -> bool:
        return self.kind != "uniform-box"


@dataclass(frozen=True)
class PreferenceGrid:
    """Finite cover of the simplex over domains, one discrete preference per row."""

    cells: np.ndarray
    resolution: int

    def __post_init__(self):
        cells = np.array(self.cells, dtype=float)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    def __len__(self):
        return len(self.cells)

    def preference(self, index: int) -> Preference:
        return Preference.discrete(self.cells[index])

    def index_of(self, weights, atol: float = 1e-9) -> int:
        """Row index of ``weights`` in the grid; raises ``KeyError`` if absent."""
        w = np.asarray(weights.weights if isinstance(weights, Preference) else weights, float)
        hits = np.flatnonzero(np.all(np.abs(self.cells - w) <= atol, axis=1))
        if hits.size == 0:
            raise KeyError(f"preference {w} is not a grid cell")
        return int(hits[0])

    def nearest(self, weights) -> int:
        w = np.asarray(weights, float)
        return int(np.argmin(np.abs(self.cells - w).sum(axis=1)))

    def delta_indices(self) -> np.ndarray:
        """Grid index of the one-hot cell for each domain."""
        n = self.cells.shape[1]
        return np.array([self.index_of(np.eye(n)[k]) for k in range(n)])


def default_resolution(n_domains: int) -> int:
    return 10 if n_domains <= 2 else 4


def make_grid(n_domains: int, resolution: int | None = None) -> PreferenceGrid:
    """All points of the simplex with coordinates in multiples of ``1/resolution``."""
    if n_domains < 1:
        raise ValueError("need at least one domain")
    R = default_resolution(n_domains) if resolution is None else int(resolution)
    if R < 1:
        raise ValueError("resolution must be >= 1")
    cells = []
    for bars in itertools.combinations(range(R + n_domains - 1), n_domains - 1):
        counts = np.diff(np.concatenate(([-1], bars, [R + n_domains - 1]))) - 1
        cells.append(counts / R)
    # order by weight on the last domain, so 2-domain grids run [1,0] -> [0,1]
    cells = np.array(sorted(cells, key=lambda c: tuple(c[::-1])))
    return PreferenceGrid(cells, R)


def single_cell_grid(weights) -> PreferenceGrid:
    return PreferenceGrid(np.atleast_2d(np.asarray(weights, float)), 0)


# ---------------------------------------------------------------------------
# validation, evaluation, sampling


def validate_mdp(mdp: MultiDomainMDP) -> list[str]:
    """List every structural defect of ``mdp``; an empty list means valid."""
    issues: list[str] = []
    S, A = mdp.n_states, mdp.n_actions
    if not 0.0 < mdp.gamma < 1.0:
        issues.append(f"gamma out of range: {mdp.gamma}")
    if len(mdp.domains) == 0:
        issues.append("no domains")
    mu = mdp.initial_dist
    if mu.shape != (S,):
        issues.append(f"initial_dist shape {mu.shape} != ({S},)")
    elif np.any(mu < 0) or abs(mu.sum() - 1.0) > ROW_TOL:
        issues.append("initial_dist is not a probability vector")
    for label, group in (("domain", mdp.domains), ("eval domain", mdp.eval_domains)):
        for k, dom in enumerate(group):
            if dom.transition.shape != (S, A, S):
                issues.append(f"{label} {k}: transition shape {dom.transition.shape} != {(S, A, S)}")
                continue
            if dom.reward.shape != (S, A):
                issues.append(f"{label} {k}: reward shape {dom.reward.shape} != {(S, A)}")
            if not np.all(np.isfinite(dom.kappa)):
                issues.append(f"{label} {k}: kappa not finite")
            if not np.all(np.isfinite(dom.reward)):
                issues.append(f"{label} {k}: reward not finite")
            sums = dom.transition.sum(axis=-1)
            for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_TOL)):
                issues.append(f"{label} {k}: row (s={s}, a={a}) sums to {sums[s, a]:.12g}")
            for s, a in zip(*np.nonzero(np.any(dom.transition < 0, axis=-1))):
                issues.append(f"{label} {k}: row (s={s}, a={a}) has negative entries")
        if group and len({d.kappa.shape for d in group}) > 1:
            issues.append(f"{label}s have inconsistent kappa dimensions")
    return issues


def _entropy_term(policy: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(policy > 0, np.log(np.where(policy > 0, policy, 1.0)), 0.0)
    return -(policy * logs).sum(axis=-1)


def policy_value_exact(mdp: MultiDomainMDP, policy: np.ndarray, alpha: float = 0.0) -> np.ndarray:
    """Exact per-domain soft value of a stationary policy.

    ``policy`` is ``[S, A]``, shared by all domains, or ``[K, S, A]`` with
    one policy per domain.  Returns ``V`` of shape ``[K, S]`` solving
    ``(I - gamma P_pi) V = r_pi + alpha H(pi)`` for each domain.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    pi = np.asarray(policy, dtype=float)
    K = mdp.n_domains
    if pi.ndim == 2:
        pi = np.broadcast_to(pi, (K,) + pi.shape)
    if pi.shape != (K, mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.shape} incompatible with MDP")
    if np.any(pi < -1e-12) or np.any(np.abs(pi.sum(-1) - 1.0) > 1e-8):
        raise ValueError("policy rows must be probability vectors")
    P, R = mdp.P, mdp.R
    P_pi = np.einsum("ksa,ksat->kst", pi, P)
    r_pi = np.einsum("ksa,ksa->ks", pi, R)
    if alpha > 0:
        r_pi = r_pi + alpha * _entropy_term(pi)
    lhs = np.eye(mdp.n_states)[None] - mdp.gamma * P_pi
    try:
        return np.linalg.solve(lhs, r_pi[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:  # pragma: no cover - impossible for gamma < 1
        raise RuntimeError("singular policy-evaluation system") from exc


def initial_value(mdp: MultiDomainMDP, V: np.ndarray) -> np.ndarray:
    """Value vector at the shared initial distribution, one entry per domain."""
    return V @ mdp.initial_dist


def sample_transition(mdp: MultiDomainMDP, domain: int, state: int, action: int,
                      rng: np.random.Generator) -> tuple[int, float]:
    if not 0 <= domain < mdp.n_domains:
        raise IndexError(f"domain {domain} out of range")
    if not 0 <= state < mdp.n_states or not 0 <= action < mdp.n_actions:
        raise IndexError(f"(state, action) = ({state}, {action}) out of range")
    dom = mdp.domains[domain]
    row = dom.transition[state, action]
    nxt = int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))
    nxt = min(nxt, mdp.n_states - 1)
    return nxt, float(dom.reward[state, action])


def monte_carlo_returns(mdp: MultiDomainMDP, policy: np.ndarray, domain: int, episodes: int,
                        horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Discounted returns of ``episodes`` rollouts, vectorized across episodes."""
    dom = mdp.domains[domain]
    cum_P = np.cumsum(dom.transition, axis=-1)
    cum_pi = np.cumsum(np.asarray(policy, float), axis=-1)
    S = mdp.n_states
    s = np.searchsorted(np.cumsum(mdp.initial_dist), rng.random(episodes), side="right")
    s = np.minimum(s, S - 1)
    ret = np.zeros(episodes)
    disc = 1.0
    for _ in range(horizon):
        u = rng.random((2, episodes))
        a = np.minimum((u[0][:, None] > cum_pi[s]).sum(axis=1), mdp.n_actions - 1)
        ret += disc * dom.reward[s, a]
        s = np.minimum((u[1][:, None] > cum_P[s, a]).sum(axis=1), S - 1)
        disc *= mdp.gamma
    return ret


def horizon_for(gamma: float, tol: float = 1e-10) -> int:
    """Episode length after which the discounted tail is below ``tol`` (relative)."""
    return int(math.ceil(math.log(tol) / math.log(gamma)))


# ---------------------------------------------------------------------------
# text serialization


def _fmt(x: float) -> str:
    return repr(float(x))


def dumps_mdp(mdp: MultiDomainMDP) -> str:
    """Serialize to the line-oriented ``key value...`` format.

    Layout::

        pmomdp 1
        n_states S
        n_actions A
        gamma g
        initial p_0 ... p_{S-1}
        n_domains K
        n_eval_domains E
        domain k | eval_domain e
        kappa k_1 ... k_d
        transition s a p_0 ... p_{S-1}      (S*A lines, row-major)
        reward s r_0 ... r_{A-1}            (S lines)
    """
    lines = ["pmomdp 1", f"n_states {mdp.n_states}", f"n_actions {mdp.n_actions}",
             f"gamma {_fmt(mdp.gamma)}", "initial " + " ".join(map(_fmt, mdp.initial_dist)),
             f"n_domains {mdp.n_domains}", f"n_eval_domains {len(mdp.eval_domains)}"]
    for tag, group in (("domain", mdp.domains), ("eval_domain", mdp.eval_domains)):
        for k, dom in enumerate(group):
            lines.append(f"{tag} {k}")
            lines.append("kappa " + " ".join(map(_fmt, dom.kappa)))
            for s in range(mdp.n_states):
                for a in range(mdp.n_actions):
                    lines.append(f"transition {s} {a} " + " ".join(map(_fmt, dom.transition[s, a])))
            for s in range(mdp.n_states):
                lines.append(f"reward {s} " + " ".join(map(_fmt, dom.reward[s])))
    return "\n".join(lines) + "\n"


def loads_mdp(text: str) -> MultiDomainMDP:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows or rows[0] != ["pmomdp", "1"]:
        raise ValueError("not a pmomdp v1 file")
    head = {r[0]: r[1:] for r in rows[1:7]}
    S, A = int(head["n_states"][0]), int(head["n_actions"][0])
    gamma = float(head["gamma"][0])
    mu = np.array(head["initial"], dtype=float)
    groups: dict[str, list[DomainSpec]] = {"domain": [], "eval_domain": []}
    if len(groups["domain"]) == 0 and int(head["n_domains"][0]) < 1:
        raise ValueError("file declares no domains")
    i = 7
    while i < len(rows):
        tag = rows[i][0]
        if tag not in groups:
            raise ValueError(f"unexpected line {' '.join(rows[i])!r}")
        kappa = np.array(rows[i + 1][1:], dtype=float)
        T = np.zeros((S, A, S))
        Rw = np.zeros((S, A))
        j = i + 2
        for _ in range(S * A):
            _, s, a, *p = rows[j]
            T[int(s), int(a)] = np.array(p, dtype=float)
            j += 1
        for _ in range(S):
            _, s, *r = rows[j]
            Rw[int(s)] = np.array(r, dtype=float)
            j += 1
        groups[tag].append(DomainSpec(kappa, T, Rw))
        i = j
    if len(groups["domain"]) != int(head["n_domains"][0]) or \
            len(groups["eval_domain"]) != int(head["n_eval_domains"][0]):
        raise ValueError("domain counts do not match the header")
    return MultiDomainMDP(S, A, tuple(groups["domain"]), gamma, mu, tuple(groups["eval_domain"]))


def save_mdp(mdp: MultiDomainMDP, path) -> None:
    Path(path).write_text(dumps_mdp(mdp), newline="\n")


def load_mdp(path) -> MultiDomainMDP:
    return loads_mdp(Path(path).read_text())
