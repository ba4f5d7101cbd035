"""Sample-based training loop with tabular twin critics.

Critics for the preference-conditioned variants are indexed
``[cell, domain, state, action]``; the utopia variants drop the cell axis.
Each critic array carries a leading twin axis of length 2.  Policies are
always ``[cell, state, action]`` over the preference grid, and continuous
beliefs are projected onto that grid.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dp_solvers import first_argmax, soft_policy, soft_value
from .osi import DynamicsModel, EnsembleOSI, OSIBatch, Posterior, ensemble_predict, ensemble_update
from .pmomdp import MultiDomainMDP, Preference, PreferenceGrid, initial_value, make_grid, policy_value_exact

VARIANTS = ("drsac", "sirsa", "cmdsac", "emdsac", "umdsirsa", "umdsac1", "umdsac2")
UTOPIA = ("umdsac1", "umdsac2", "umdsirsa")
USES_OSI = ("sirsa", "umdsirsa")
METRIC_COLUMNS = ("step", "episode", "return", "critic_loss", "actor_objective", "osi_entropy")


@dataclass
class TrainConfig:
    total_steps: int = 200_000
    warmup: int = 1_000
    batch_size: int = 256
    tau: float = 0.005
    alpha: float = 0.05
    lr: float = 0.1
    grid_resolution: int | None = None
    variant: str = "cmdsac"
    seed: int = 0
    sirsa_subsets: int = 100
    horizon: int = 30
    capacity: int = 100_000
    literal_targets: bool = False     # drop the entropy term from TD targets
    osi_lr: float = 0.05
    subset_spread: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; known: {VARIANTS}")
        if not 0 <= self.warmup <= self.total_steps:
            raise ValueError("warmup must lie in [0, total_steps]")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.capacity < 1 or self.horizon < 1:
            raise ValueError("batch_size, capacity and horizon must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


class ReplayBuffer:
    """Ring buffer of ``(s, a, r, s', kappa index, cell, mu, sigma)``."""

    def __init__(self, capacity: int, belief_dim: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros(capacity, dtype=np.int64)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros(capacity, dtype=np.int64)
        self.k = np.zeros(capacity, dtype=np.int64)
        self.cell = np.zeros(capacity, dtype=np.int64)
        self.mu = np.zeros((capacity, belief_dim))
        self.sigma = np.zeros((capacity, belief_dim))
        self.stamp = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.inserted = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, k, cell, mu=0.0, sigma=0.0) -> None:
        i = self.inserted % self.capacity
        self.s[i], self.a[i], self.r[i], self.s2[i] = s, a, r, s2
        self.k[i], self.cell[i] = k, cell
        self.mu[i], self.sigma[i] = mu, sigma
        self.stamp[i] = self.inserted
        self.inserted += 1
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Indices of ``min(n, size)`` distinct stored transitions."""
        if self.size == 0:
            raise ValueError("empty replay buffer")
        return rng.choice(self.size, size=min(n, self.size), replace=False)


# ---------------------------------------------------------------------------
# belief projection


def box_to_weights(pref: Preference, kappas: np.ndarray) -> np.ndarray:
    """Domain weights for a uniform box over a one-dimensional kappa line.

    The box's mass is spread onto the neighbouring domains by linear
    (hat-function) interpolation, which keeps the mean when the box lies
    inside the domain range.
    """
    return boxes_to_weights(np.atleast_1d(pref.mu)[:1], np.atleast_1d(pref.sigma)[:1], kappas)[0]


def boxes_to_weights(mu, sigma, kappas: np.ndarray, nodes: int = 64) -> np.ndarray:
    """Vectorized :func:`box_to_weights` for ``B`` one-dimensional boxes; returns ``[B, K]``."""
    k = np.asarray(kappas, float).reshape(len(kappas), -1)[:, 0]
    mu = np.asarray(mu, float).reshape(-1)
    half = math.sqrt(3.0) * np.asarray(sigma, float).reshape(-1)
    if len(k) == 1:
        return np.ones((len(mu), 1))
    order = np.argsort(k)
    ks = k[order]
    x = mu[:, None] + half[:, None] * (2 * (np.arange(nodes) + 0.5) / nodes - 1)
    xc = np.clip(x, ks[0], ks[-1])
    j = np.clip(np.searchsorted(ks, xc) - 1, 0, len(ks) - 2)
    t = (xc - ks[j]) / (ks[j + 1] - ks[j])
    w = np.zeros((len(mu), len(k)))
    rows = np.repeat(np.arange(len(mu)), nodes)
    np.add.at(w, (rows, order[j].ravel()), (1 - t).ravel())
    np.add.at(w, (rows, order[j + 1].ravel()), t.ravel())
    return w / w.sum(axis=1, keepdims=True)


def nearest_cells(grid: PreferenceGrid, weights: np.ndarray) -> np.ndarray:
    """Row-wise :meth:`PreferenceGrid.nearest` (L1 distance, lowest index on ties)."""
    d = np.abs(weights[:, None, :] - np.asarray(grid.cells, float)[None]).sum(-1)
    return np.argmin(d, axis=1)


def project_to_grid(pref, grid: PreferenceGrid, kappas: np.ndarray) -> int:
    if isinstance(pref, Posterior):
        pref = Preference.uniform_box(pref.mu, pref.sigma)
    w = pref.weights if pref.is_discrete else box_to_weights(pref, kappas)
    return grid.nearest(w)


def sirsa_sample_subsets(full: Preference, B: int, rng: np.random.Generator,
                         spread: float = 1.0) -> list[Preference]:
    """``B`` uniform boxes inside ``full``.

    Each box keeps ``[lo + spread u1 W, hi - spread (1 - u2) W]`` for sorted
    uniforms ``u1 <= u2`` and full width ``W``; ``spread = 0`` returns the
    full box every time.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    if full.is_discrete:
        raise ValueError("subsets are drawn from a uniform-box preference")
    if not 0 <= spread <= 1:
        raise ValueError("spread must lie in [0, 1]")
    lo, hi = full.support
    W = hi - lo
    out = []
    for _ in range(B):
        u = np.sort(rng.random((2, len(lo))), axis=0)
        a = lo + spread * u[0] * W
        b = hi - spread * (1 - u[1]) * W
        out.append(Preference.from_bounds(a, b))
    return out


# ---------------------------------------------------------------------------
# update rules


def _logpi(pi: np.ndarray) -> np.ndarray:
    return np.log(np.where(pi > 0, pi, 1.0))


def polyak_update(target: np.ndarray, online: np.ndarray, tau: float) -> np.ndarray:
    if target.shape != online.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {online.shape}")
    if not 0 <= tau <= 1:
        raise ValueError("tau must lie in [0, 1]")
    target *= 1.0 - tau
    target += tau * online
    return target


def filter_cells(qbar_j: np.ndarray, pi: np.ndarray, alpha: float) -> np.ndarray:
    """Argmax over candidate cells ``j`` of ``E_{pi_j}[qbar_j - alpha ln pi_j]``.

    ``qbar_j`` is ``[B, J, A]`` and ``pi`` the matching ``[B, J, A]``.
    """
    scores = np.einsum("bja,bja->bj", pi, qbar_j - alpha * _logpi(pi))
    return first_argmax(scores, axis=-1)


def td_target(variant: str, batch: dict, target_q: np.ndarray, policy: np.ndarray,
              W: np.ndarray, alpha: float, gamma: float, literal: bool = False) -> np.ndarray:
    """``r + gamma * E_{a'}[min_j Qbar_j(s', a', kappa, cell*) - alpha ln pi(a'|s', cell*)]``.

    ``batch`` holds arrays ``s, a, r, s2, k, cell`` and, for the OSI variants,
    ``next_cell`` (the identifier's belief after the transition, on the
    grid).  ``cell*`` is the variant's next-action preference; with
    ``literal`` the entropy term is dropped.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    s2, k, cell = batch["s2"], batch["k"], batch["cell"]
    qmin = target_q.min(axis=0)
    n = len(s2)
    if variant in UTOPIA:
        K = qmin.shape[0]
        if variant == "umdsac1":
            nxt = np.asarray(batch["delta_cell"])[k]
        elif variant == "umdsac2":
            # chi(s', kappa): grid policy best for domain kappa
            cand = policy[:, s2].transpose(1, 0, 2)                    # [B, C, A]
            qk = np.broadcast_to(qmin[k, s2][:, None, :], cand.shape)
            nxt = filter_cells(qk, cand, alpha)
        else:
            nxt = batch["next_cell"]
        q_next = qmin[k, s2]                                            # [B, A]
    else:
        if variant == "emdsac":
            w = W[cell]                                                 # [B, K]
            cand = policy[:, s2].transpose(1, 0, 2)                     # [B, C, A]
            qbar = np.einsum("bk,cbka->bca", w, qmin[:, :, s2].transpose(0, 2, 1, 3))
            nxt = filter_cells(qbar, cand, alpha)
        elif variant in ("sirsa",):
            nxt = batch["next_cell"]
        else:
            nxt = cell
        q_next = qmin[nxt, k, s2]
    pi = policy[nxt, s2]                                                # [B, A]
    inner = q_next if literal else q_next - alpha * _logpi(pi)
    v = np.einsum("ba,ba->b", pi, inner)
    return batch["r"] + gamma * v


def _entry_index(variant: str, batch: dict, shape) -> np.ndarray:
    if variant in UTOPIA:
        return np.ravel_multi_index((batch["k"], batch["s"], batch["a"]), shape)
    return np.ravel_multi_index((batch["cell"], batch["k"], batch["s"], batch["a"]), shape)


def critic_update(q: np.ndarray, entries: np.ndarray, targets: np.ndarray, lr,
                  visits: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Tabular SGD on the squared TD error of both twins.

    ``entries`` are flat indices into one twin table.  Duplicates in a batch
    are averaged, so a single entry with ``lr = 1`` lands exactly on its
    target.  ``lr`` is a scalar or a callable of the per-entry visit counts.
    Returns ``(q, mean squared TD error per twin)``.
    """
    if len(entries) == 0:
        raise ValueError("empty batch")
    n_cells = q[0].size
    flat = q.reshape(2, n_cells)
    loss = np.empty(2)
    cnt = np.bincount(entries, minlength=n_cells)
    hit = cnt > 0
    if visits is not None:
        vf = visits.reshape(-1)
        vf[hit] += 1
        rate = lr(vf[hit]) if callable(lr) else float(lr)
    else:
        rate = float(lr)
    for j in range(2):
        td = targets - flat[j, entries]
        loss[j] = float(np.mean(td ** 2))
        mean_td = np.bincount(entries, weights=td, minlength=n_cells)[hit] / cnt[hit]
        flat[j, hit] += rate * mean_td
    return q, loss


def actor_update(policy: np.ndarray, q: np.ndarray, W: np.ndarray, cells, states,
                 alpha: float, utopia: bool = False) -> tuple[np.ndarray, float]:
    """Exact soft projection at every visited ``(cell, state)``.

    Returns the updated policy and the batch's mean soft objective
    ``E_pi[w^T min_j Q - alpha ln pi]`` after the update.
    """
    S = policy.shape[1]
    seen = np.zeros(policy.shape[0] * S, dtype=bool)
    seen[np.asarray(cells) * S + np.asarray(states)] = True
    c, s = np.divmod(np.flatnonzero(seen), S)
    qmin = q.min(axis=0)
    if utopia:
        qbar = np.einsum("bk,kba->ba", W[c], qmin[:, s])
    else:
        qbar = np.einsum("bk,bka->ba", W[c], qmin[c, :, s])
    policy[c, s] = soft_policy(qbar, alpha)
    return policy, float(np.mean(soft_value(qbar, alpha)))


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    config: TrainConfig
    grid: PreferenceGrid
    q: np.ndarray
    target_q: np.ndarray
    policy: np.ndarray
    metrics: list[dict] = field(default_factory=list)
    osi: EnsembleOSI | None = None

    def scalarized_soft_values(self, mdp: MultiDomainMDP) -> np.ndarray:
        out = []
        for c, w in enumerate(self.grid.cells):
            V = policy_value_exact(mdp, self.policy[c], self.config.alpha)
            out.append(w @ initial_value(mdp, V))
        return np.array(out)

    def write_metrics(self, path) -> None:
        write_metrics_csv(self.metrics, path)


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(METRIC_COLUMNS)
        for r in rows:
            out.writerow([r["step"], r["episode"]] + [
                "" if r[c] is None or (isinstance(r[c], float) and math.isnan(r[c])) else f"{r[c]:.8f}"
                for c in METRIC_COLUMNS[2:]])


def _kappa_range(mdp: MultiDomainMDP) -> tuple[float, float]:
    k = mdp.kappas[:, 0]
    return float(k.min()), float(k.max())


def run_training(mdp: MultiDomainMDP, config: TrainConfig, grid: PreferenceGrid | None = None) -> TrainResult:
    """Run the training skeleton for ``config.total_steps`` environment steps.

    Episodes last ``config.horizon`` steps from the initial distribution.
    At the start of each episode a preference is drawn (a grid cell, the
    full-support cell for DR, or one of the pre-drawn subsets for the
    subset-sampling variants) and a domain is drawn from it.  The first
    ``warmup`` steps act uniformly at random; after that every step stores
    one transition and runs one critic, actor and Polyak update.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    v = cfg.variant
    K, S, A = mdp.n_domains, mdp.n_states, mdp.n_actions
    grid = grid if grid is not None else make_grid(K, cfg.grid_resolution)
    W = np.asarray(grid.cells, float)
    C = len(W)
    utopia = v in UTOPIA
    if utopia:
        grid.delta_indices()
    table = (K, S, A) if utopia else (C, K, S, A)
    q = np.zeros((2,) + table)
    tq = q.copy()
    visits = np.zeros(table, dtype=np.int64)
    policy = np.full((C, S, A), 1.0 / A)
    lr0 = cfg.lr
    lr = lambda n: lr0 / np.sqrt(n)
    buf = ReplayBuffer(cfg.capacity)
    kappas = mdp.kappas
    full_cell = grid.nearest(np.full(K, 1.0 / K))
    delta_cell = np.array([grid.index_of(np.eye(K)[k]) for k in range(K)])

    osi = dyn = None
    subsets = None
    if v in USES_OSI or v == "sirsa":
        lo, hi = _kappa_range(mdp)
        full = Preference.from_bounds(lo, hi)
        subsets = sirsa_sample_subsets(full, cfg.sirsa_subsets, rng, cfg.subset_spread)
    if v in USES_OSI:
        osi = EnsembleOSI(S, A, _kappa_range(mdp), seed=int(rng.integers(2 ** 31)))
        dyn = DynamicsModel.empty(mdp)

    cum_P = np.cumsum(mdp.P, axis=-1)
    cum_init = np.cumsum(mdp.initial_dist)
    metrics: list[dict] = []
    step, episode = 0, 0
    while step < cfg.total_steps:
        if v == "drsac":
            cell, box = full_cell, None
        elif subsets is not None:
            box = subsets[int(rng.integers(len(subsets)))]
            cell = project_to_grid(box, grid, kappas)
        else:
            cell, box = int(rng.integers(C)), None
        w = W[cell] if box is None else box_to_weights(box, kappas)
        k = int(min(np.searchsorted(np.cumsum(w), rng.random(), side="right"), K - 1))
        s = int(min(np.searchsorted(cum_init, rng.random(), side="right"), S - 1))
        belief = (np.atleast_1d(box.mu).astype(float), np.atleast_1d(box.sigma).astype(float)) if box else None
        ret, disc = 0.0, 1.0
        closs, aobj, ents = [], [], []
        for _ in range(cfg.horizon):
            if step >= cfg.total_steps:
                break
            if step < cfg.warmup:
                a = int(rng.integers(A))
            else:
                a = int(min(np.searchsorted(np.cumsum(policy[cell, s]), rng.random(), side="right"), A - 1))
            s2 = int(min(np.searchsorted(cum_P[k, s, a], rng.random(), side="right"), S - 1))
            r = float(mdp.R[k, s, a])
            ret += disc * r
            disc *= mdp.gamma
            mu, sg = belief if belief is not None else (0.0, 0.0)
            buf.add(s, a, r, s2, k, cell, mu, sg)
            if osi is not None:
                post = ensemble_predict(osi, s, a, s2, (belief[0][None], belief[1][None]))
                belief = (np.atleast_1d(post.mu), np.atleast_1d(post.sigma))
                ents.append(Posterior.box(*belief).entropy())
                cell = project_to_grid(Posterior.box(*belief), grid, kappas)
            step += 1
            s = s2
            if step <= cfg.warmup:
                continue
            idx = buf.sample(cfg.batch_size, rng)
            batch = {"s": buf.s[idx], "a": buf.a[idx], "r": buf.r[idx], "s2": buf.s2[idx],
                     "k": buf.k[idx], "cell": buf.cell[idx], "delta_cell": delta_cell}
            if osi is not None:
                ob = OSIBatch(batch["s"], batch["a"], batch["s2"], buf.mu[idx], buf.sigma[idx], batch["k"])
                ensemble_update(osi, dyn, ob, cfg.osi_lr, rng)
                nxt = ensemble_predict(osi, ob.s, ob.a, ob.s_next, (ob.mu, ob.sigma))
                mus = np.atleast_2d(nxt.mu).reshape(len(idx), -1)
                sgs = np.atleast_2d(nxt.sigma).reshape(len(idx), -1)
                batch["next_cell"] = nearest_cells(grid, boxes_to_weights(mus[:, 0], sgs[:, 0], kappas))
            y = td_target(v, batch, tq, policy, W, cfg.alpha, mdp.gamma, cfg.literal_targets)
            entries = _entry_index(v, batch, table)
            q, loss = critic_update(q, entries, y, lr, visits)
            # the subset-sampling actor conditions on the identifier's belief
            actor_cells = batch["next_cell"] if v == "sirsa" else batch["cell"]
            policy, obj = actor_update(policy, q, W, actor_cells, batch["s"], cfg.alpha, utopia)
            if utopia:
                # every grid policy reads the same per-domain tables
                policy = soft_policy(np.einsum("ck,ksa->csa", W, q.min(axis=0)), cfg.alpha)
            polyak_update(tq, q, cfg.tau)
            closs.append(float(loss.mean()))
            aobj.append(obj)
        metrics.append({"step": step, "episode": episode, "return": ret,
                        "critic_loss": float(np.mean(closs)) if closs else float("nan"),
                        "actor_objective": float(np.mean(aobj)) if aobj else float("nan"),
                        "osi_entropy": float(np.mean(ents)) if ents else float("nan")})
        episode += 1
    return TrainResult(cfg, grid, q, tq, policy, metrics, osi)
