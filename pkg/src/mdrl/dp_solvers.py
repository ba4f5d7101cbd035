"""Exact tabular soft dynamic programming for the multi-domain Bellman variants.

All solvers run synchronous full sweeps: the soft policy is recomputed
from the current tables, then every table entry is backed up once (with
adaptive damping when the coupled sweep stops contracting).  Tables
conditioned on a preference are indexed ``[cell, domain, state, action]``;
the utopia variants keep one table per domain, ``[domain, state, action]``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .pmomdp import (MultiDomainMDP, Preference, PreferenceGrid, initial_value, make_grid,
                     policy_value_exact, single_cell_grid)

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.05
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100_000
TIE_ATOL = 1e-12


class SolverDivergence(RuntimeError):
    pass


class ConvergenceWarning(UserWarning):
    pass


def soft_policy(qbar, alpha: float) -> np.ndarray:
    """Softmax of ``qbar / alpha`` along the last axis."""
    q = np.asarray(qbar, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite action values")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    z = (q - q.max(axis=-1, keepdims=True)) / alpha
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_value(qbar, alpha: float) -> np.ndarray:
    """``alpha * logsumexp(qbar / alpha)`` along the last axis."""
    q = np.asarray(qbar, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite action values")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    m = q.max(axis=-1)
    return m + alpha * np.log(np.exp((q - m[..., None]) / alpha).sum(axis=-1))


def first_argmax(scores: np.ndarray, axis: int = -1, atol: float = TIE_ATOL) -> np.ndarray:
    """Argmax that treats values within ``atol`` (relative) of the max as ties, lowest index wins."""
    best = scores.max(axis=axis, keepdims=True)
    hit = scores >= best - atol * np.maximum(1.0, np.abs(best))
    return np.argmax(hit, axis=axis)


def _soft_state_values(Q: np.ndarray, qbar: np.ndarray, alpha: float):
    """Policy, per-domain soft state values ``E_pi[Q_k - alpha ln pi]`` and the scalar soft value.

    ``Q`` is ``[C, K, S, A]`` and ``qbar`` its scalarization ``[C, S, A]``.
    Uses ``-alpha ln pi = soft_value(qbar) - qbar``.
    """
    pi = soft_policy(qbar, alpha)
    sv = soft_value(qbar, alpha)
    v = np.einsum("csa,cksa->cks", pi, Q - qbar[:, None]) + sv[:, None]
    return pi, v


@dataclass
class SolverResult:
    algo: str
    q: np.ndarray                 # [C, K, S, A] or [K, S, A] for utopia variants
    policy: np.ndarray            # [C, S, A]
    grid: PreferenceGrid
    alpha: float
    gamma: float
    converged: bool
    iterations: int
    residuals: list[float] = field(default_factory=list)
    chi: np.ndarray | None = None  # [C, S] (envelope) or [K, S] (utopia-v2)

    @property
    def conditioned(self) -> bool:
        return self.q.ndim == 4

    def cell_q(self, cell: int) -> np.ndarray:
        """Per-domain Q used by the policy at ``cell``, shape ``[K, S, A]``."""
        return self.q[cell] if self.conditioned else self.q

    def policy_for(self, pref) -> np.ndarray:
        """Policy ``[S, A]`` for a grid preference (or the nearest grid cell)."""
        w = pref.weights if isinstance(pref, Preference) else np.asarray(pref, float)
        try:
            return self.policy[self.grid.index_of(w)]
        except KeyError:
            return self.policy[self.grid.nearest(w)]

    def scalarized_soft_values(self, mdp: MultiDomainMDP, cells=None) -> np.ndarray:
        """Exact ``w^T V^{pi_w}(s0)`` (soft, at the solver's alpha) for each grid cell."""
        cells = range(len(self.grid)) if cells is None else cells
        out = []
        for c in cells:
            V = policy_value_exact(mdp, self.policy[c], self.alpha)
            out.append(self.grid.cells[c] @ initial_value(mdp, V))
        return np.array(out)


def _bound(mdp: MultiDomainMDP, alpha: float) -> float:
    return (np.abs(mdp.R).max() + alpha * math.log(mdp.n_actions)) / (1.0 - mdp.gamma)


def _check_args(alpha, tol, max_iter):
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be > 0 and max_iter >= 1")


def _iterate(step, Q0: np.ndarray, tol: float, max_iter: int, bound: float, algo: str,
             patience: int = 50, min_step: float = 1.0 / 64, stall: int = 2_000):
    """Run ``Q <- Q + eta (T Q - Q)`` until ``max |T Q - Q| <= tol``.

    ``eta`` starts at 1 (plain synchronous sweeps) and is halved whenever the
    fixed-point residual has not reached a new minimum for ``patience``
    sweeps; coupled policy feedback on mixed preferences otherwise cycles.
    Once ``eta`` is at ``min_step`` and ``stall`` more sweeps bring no new
    minimum, the map is taken to have no fixed point and the last iterate is
    returned unconverged.
    """
    Q = Q0
    residuals = []
    eta, best, since = 1.0, np.inf, 0
    for it in range(1, max_iter + 1):
        TQ, aux = step(Q)
        delta = float(np.max(np.abs(TQ - Q)))
        residuals.append(delta)
        if delta <= tol:
            return TQ, aux, True, it, residuals
        if delta < best:
            best, since = delta, 0
        else:
            since += 1
            if since >= patience and eta > min_step:
                eta, since = eta / 2, 0
                log.debug("%s: residual stalled at %.3e, damping to %.4g", algo, best, eta)
            elif since >= stall:
                warnings.warn(f"{algo}: residual stalled at {best:.3e} after {it} sweeps "
                              f"(last change {delta:.3e})", ConvergenceWarning, stacklevel=3)
                return Q, aux, False, it, residuals
        Q = TQ if eta == 1.0 else Q + eta * (TQ - Q)
        if not np.all(np.isfinite(Q)) or np.max(np.abs(Q)) > 10.0 * bound:
            raise SolverDivergence(f"{algo}: |Q| = {np.max(np.abs(Q)):.3g} exceeds 10x the "
                                   f"bound {bound:.3g} after {it} sweeps")
    warnings.warn(f"{algo}: no convergence after {max_iter} sweeps (last change "
                  f"{residuals[-1]:.3e})", ConvergenceWarning, stacklevel=3)
    return Q, aux, False, max_iter, residuals


def _conditioned_solve(mdp: MultiDomainMDP, grid: PreferenceGrid, alpha: float, tol: float,
                       max_iter: int, envelope: bool, algo: str) -> SolverResult:
    _check_args(alpha, tol, max_iter)
    W = np.asarray(grid.cells, float)
    if W.shape[1] != mdp.n_domains:
        raise ValueError("grid dimension does not match the number of domains")
    P, R, g = mdp.P, mdp.R, mdp.gamma
    C, S = len(W), mdp.n_states
    cols = np.arange(S)

    def step(Q):
        qbar = np.einsum("ck,cksa->csa", W, Q)
        pi, v = _soft_state_values(Q, qbar, alpha)
        chi = None
        if envelope:
            scores = np.einsum("ck,jks->csj", W, v)      # query cell c, candidate cell j
            chi = first_argmax(scores, axis=-1)          # [C, S]
            v = v[chi, :, cols[None, :]].transpose(0, 2, 1)
        Q_new = R[None] + g * np.einsum("ksat,ckt->cksa", P, v)
        return Q_new, (pi, chi)

    Q0 = np.zeros((C, mdp.n_domains, S, mdp.n_actions))
    Q, (pi, chi), ok, it, res = _iterate(step, Q0, tol, max_iter, _bound(mdp, alpha), algo)
    qbar = np.einsum("ck,cksa->csa", W, Q)
    pi = soft_policy(qbar, alpha)
    if envelope:
        chi = envelope_filter_table(Q, pi, W, alpha)
    return SolverResult(algo, Q, pi, grid, alpha, g, ok, it, res, chi)


def _as_weights(pref, n_domains: int) -> np.ndarray:
    if isinstance(pref, Preference):
        if not pref.is_discrete:
            raise ValueError("solve_dr needs a discrete preference over the MDP's domains")
        w = pref.weights
    else:
        w = np.asarray(pref, float)
    if w.shape != (n_domains,):
        raise ValueError(f"preference has {w.shape} entries, MDP has {n_domains} domains")
    return w


def solve_dr(mdp: MultiDomainMDP, pref, alpha: float = DEFAULT_ALPHA, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER) -> SolverResult:
    """Domain-randomization fixed point for one preference (a one-cell grid)."""
    w = _as_weights(pref, mdp.n_domains)
    return _conditioned_solve(mdp, single_cell_grid(w), alpha, tol, max_iter, False, "dr")


def solve_cmdrl(mdp: MultiDomainMDP, grid: PreferenceGrid | None = None,
                alpha: float = DEFAULT_ALPHA, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER) -> SolverResult:
    grid = make_grid(mdp.n_domains) if grid is None else grid
    return _conditioned_solve(mdp, grid, alpha, tol, max_iter, False, "cmdrl")


def solve_emdrl(mdp: MultiDomainMDP, grid: PreferenceGrid | None = None,
                alpha: float = DEFAULT_ALPHA, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER) -> SolverResult:
    """Envelope variant: targets follow the filtered cell's policy and table.

    Bootstraps from ``Q(s', ., k, chi(s', w))`` with next actions drawn from
    ``pi(.|s', chi(s', w))``; the improvement step is the conditioned one.
    """
    grid = make_grid(mdp.n_domains) if grid is None else grid
    return _conditioned_solve(mdp, grid, alpha, tol, max_iter, True, "emdrl")


def filter_scores(Q: np.ndarray, policy: np.ndarray, W: np.ndarray, alpha: float) -> np.ndarray:
    """``scores[c, s, j] = E_{a~pi_j}[w_c^T Q(s, a, ., j) - alpha ln pi_j(a|s)]``."""
    with np.errstate(divide="ignore"):
        logp = np.where(policy > 0, np.log(np.where(policy > 0, policy, 1.0)), 0.0)
    qbar = np.einsum("ck,jksa->cjsa", W, Q)
    ent = -(policy * logp).sum(-1)                        # [J, S]
    return np.einsum("jsa,cjsa->csj", policy, qbar) + alpha * ent.T[None]


def envelope_filter_table(Q: np.ndarray, policy: np.ndarray, W: np.ndarray, alpha: float) -> np.ndarray:
    return first_argmax(filter_scores(Q, policy, W, alpha), axis=-1)


def envelope_filter(result: SolverResult, state: int, cell: int) -> int:
    """Grid cell maximizing the filtered objective for query cell ``cell`` at ``state``."""
    W = np.asarray(result.grid.cells, float)
    scores = filter_scores(result.q, result.policy, W[cell:cell + 1], result.alpha)[0, state]
    return int(first_argmax(scores[None])[0])


def _utopia_solve(mdp: MultiDomainMDP, grid: PreferenceGrid, alpha: float, tol: float,
                  max_iter: int, v2: bool, algo: str) -> SolverResult:
    _check_args(alpha, tol, max_iter)
    W = np.asarray(grid.cells, float)
    if W.shape[1] != mdp.n_domains:
        raise ValueError("grid dimension does not match the number of domains")
    P, R, g = mdp.P, mdp.R, mdp.gamma
    K, S = mdp.n_domains, mdp.n_states
    cols = np.arange(S)

    def chi_scores(Q):
        qbar = np.einsum("ck,ksa->csa", W, Q)
        pi = soft_policy(qbar, alpha)
        sv = soft_value(qbar, alpha)
        # scores[k, s, c] = E_{a~pi_c}[Q_k - alpha ln pi_c]
        return np.einsum("csa,ksa->ksc", pi, Q) - np.einsum("csa,csa->sc", pi, qbar)[None] + sv.T[None]

    def step(Q):
        if v2:
            sc = chi_scores(Q)
            chi = first_argmax(sc, axis=-1)               # [K, S]
            v = np.take_along_axis(sc, chi[..., None], axis=-1)[..., 0]
        else:
            chi = None
            v = soft_value(Q, alpha)                      # delta-preference policy per domain
        return R + g * np.einsum("ksat,kt->ksa", P, v), chi

    Q, chi, ok, it, res = _iterate(step, np.zeros((K, S, mdp.n_actions)), tol, max_iter,
                                   _bound(mdp, alpha), algo)
    pi = soft_policy(np.einsum("ck,ksa->csa", W, Q), alpha)
    if v2:
        chi = first_argmax(chi_scores(Q), axis=-1)
    return SolverResult(algo, Q, pi, grid, alpha, g, ok, it, res, chi)


def _require_deltas(grid: PreferenceGrid) -> None:
    try:
        grid.delta_indices()
    except KeyError as exc:
        raise ValueError("utopia solvers need every one-hot preference in the grid") from exc


def solve_umdrl_v1(mdp: MultiDomainMDP, grid: PreferenceGrid | None = None,
                   alpha: float = DEFAULT_ALPHA, tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER) -> SolverResult:
    grid = make_grid(mdp.n_domains) if grid is None else grid
    _require_deltas(grid)
    return _utopia_solve(mdp, grid, alpha, tol, max_iter, False, "umdrl1")


def solve_umdrl_v2(mdp: MultiDomainMDP, grid: PreferenceGrid | None = None,
                   alpha: float = DEFAULT_ALPHA, tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER) -> SolverResult:
    """Utopia variant whose targets follow the grid policy best for each single domain."""
    grid = make_grid(mdp.n_domains) if grid is None else grid
    _require_deltas(grid)
    return _utopia_solve(mdp, grid, alpha, tol, max_iter, True, "umdrl2")


SOLVERS = {
    "cmdrl": solve_cmdrl,
    "emdrl": solve_emdrl,
    "umdrl1": solve_umdrl_v1,
    "umdrl2": solve_umdrl_v2,
}


def solve(algo: str, mdp: MultiDomainMDP, grid: PreferenceGrid | None = None,
          alpha: float = DEFAULT_ALPHA, tol: float = DEFAULT_TOL,
          max_iter: int = DEFAULT_MAX_ITER) -> SolverResult:
    """Dispatch by name; ``"dr"`` solves the full-support (uniform) preference
    and exposes that one policy at every grid cell."""
    grid = make_grid(mdp.n_domains) if grid is None else grid
    if algo == "dr":
        res = solve_dr(mdp, Preference.uniform(mdp.n_domains), alpha, tol, max_iter)
        C = len(grid)
        return SolverResult("dr", np.broadcast_to(res.q, (C,) + res.q.shape[1:]).copy(),
                            np.repeat(res.policy, C, axis=0), grid, alpha, mdp.gamma,
                            res.converged, res.iterations, res.residuals)
    try:
        fn = SOLVERS[algo]
    except KeyError:
        raise ValueError(f"unknown solver {algo!r}") from None
    return fn(mdp, grid, alpha, tol, max_iter)


# ---------------------------------------------------------------------------
# diagnostics


def soft_q_of_policy(mdp: MultiDomainMDP, policy: np.ndarray, alpha: float) -> np.ndarray:
    """Exact per-domain soft Q of a stationary policy, ``[K, S, A]``."""
    V = policy_value_exact(mdp, policy, alpha)
    return mdp.R + mdp.gamma * np.einsum("ksat,kt->ksa", mdp.P, V)


def utopian_point(result: SolverResult) -> np.ndarray:
    """Best-per-domain soft backup values ``z*[k, s, a]`` of a utopia solve."""
    if result.conditioned:
        raise ValueError("utopian point is defined for the per-domain utopia tables")
    return np.array(result.q)


def utopia_gap(mdp: MultiDomainMDP, result: SolverResult) -> float:
    """``max over (cell, s, a)`` of ``w^T Q^{pi_w}(s, a) - w^T z*(s, a)``; <= 0 when the bound holds."""
    z = utopian_point(result)
    W = np.asarray(result.grid.cells, float)
    worst = -np.inf
    for c, w in enumerate(W):
        Qc = soft_q_of_policy(mdp, result.policy[c], result.alpha)
        worst = max(worst, float(np.max(np.einsum("k,ksa->sa", w, Qc - z))))
    return worst


@dataclass
class HierarchyReport:
    solvers: list[str]
    cells: np.ndarray            # [C, K]
    values: np.ndarray           # [n_solvers, C] scalarized soft values at s0
    converged: list[bool]
    violations: list[str]
    notes: list[str] = field(default_factory=list)

    def rows(self):
        for name, vals in zip(self.solvers, self.values):
            yield name, vals


class HierarchyViolation(AssertionError):
    pass


HIERARCHY_SOLVERS = ("dr", "cmdrl", "emdrl", "umdrl1", "umdrl2")
CONDITIONED = ("cmdrl", "emdrl")
# expected (not asserted) ordering of the scalarized values
EXPECTED_ORDER = ("dr", "cmdrl", "emdrl", "umdrl1")


def hierarchy_report(mdp: MultiDomainMDP, grid: PreferenceGrid | None = None,
                     alpha: float = DEFAULT_ALPHA, tol: float = DEFAULT_TOL,
                     slack: float = 1e-3, check: bool = True) -> HierarchyReport:
    """Scalarized soft values of every solver's policy at every grid cell.

    The one ordering that is asserted: the full-support DR policy, scored at
    ``w``, does not beat a converged conditioned policy at ``w`` by more than
    ``slack``.  Unconverged solves and the remaining orderings only produce
    notes.
    """
    grid = make_grid(mdp.n_domains) if grid is None else grid
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        results = [solve(name, mdp, grid, alpha, tol) for name in HIERARCHY_SOLVERS]
    vals = np.array([r.scalarized_soft_values(mdp) for r in results])
    ok = [r.converged for r in results]
    row = {name: i for i, name in enumerate(HIERARCHY_SOLVERS)}
    dr = vals[row["dr"]]
    violations, notes = [], []
    for name in CONDITIONED:
        i = row[name]
        if not ok[i]:
            notes.append(f"{name} did not converge; excluded from the DR check")
            continue
        violations += [f"cell {c} {grid.cells[c]}: DR-full {dr[c]:.8f} > {name} {vals[i, c]:.8f} + {slack}"
                       for c in range(len(grid)) if dr[c] > vals[i, c] + slack]
    for lo, hi in zip(EXPECTED_ORDER, EXPECTED_ORDER[1:]):
        bad = np.flatnonzero(vals[row[lo]] > vals[row[hi]] + slack)
        if len(bad):
            notes.append(f"{lo} > {hi} at cells {bad.tolist()}")
    report = HierarchyReport(list(HIERARCHY_SOLVERS), np.array(grid.cells), vals, ok,
                             violations, notes)
    if check and violations:
        raise HierarchyViolation("; ".join(violations))
    return report
