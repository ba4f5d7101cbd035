"""Online system identification.

Three pieces: the exact Bayes filter over a discrete domain set (the
oracle), a small regression ensemble whose mean and spread form a
``[mu, sigma]`` belief over kappa space, and the variational objective the
ensemble is trained on.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .pmomdp import MultiDomainMDP

SIGMA_FLOOR = 0.02
PSEUDO_COUNT = 0.1
_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(16)
_GH_W = _GH_W / _GH_W.sum()


class FilterWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Posterior:
    """Belief over domains: discrete ``weights`` or a ``[mu, sigma]`` box in kappa space."""

    weights: np.ndarray | None = None
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None
    degenerate: bool = False      # set when an update had nothing to condition on

    def __post_init__(self):
        if self.weights is not None:
            w = np.asarray(self.weights, float)
            if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("discrete posterior must be a probability vector")
        elif self.mu is not None and self.sigma is not None:
            if np.any(np.asarray(self.sigma) < 0):
                raise ValueError("sigma must be >= 0")
        else:
            raise ValueError("posterior needs weights or mu and sigma")

    @classmethod
    def uniform(cls, n_domains: int) -> "Posterior":
        return cls(weights=np.full(n_domains, 1.0 / n_domains))

    @classmethod
    def box(cls, mu, sigma) -> "Posterior":
        return cls(mu=np.atleast_1d(np.asarray(mu, float)), sigma=np.atleast_1d(np.asarray(sigma, float)))

    @property
    def is_discrete(self) -> bool:
        return self.weights is not None

    def entropy(self) -> float:
        """Shannon entropy (discrete) or Gaussian differential entropy (box form)."""
        if self.is_discrete:
            w = self.weights[self.weights > 0]
            return float(-(w * np.log(w)).sum())
        s = np.maximum(np.asarray(self.sigma, float), 1e-12)
        return float(np.sum(0.5 * np.log(2 * math.pi * math.e * s ** 2)))


def bayes_filter_step(prior: Posterior, mdp: MultiDomainMDP, s: int, a: int, s_next: int) -> Posterior:
    """Exact posterior over the MDP's domains after observing ``(s, a, s')``."""
    if not prior.is_discrete or len(prior.weights) != mdp.n_domains:
        raise ValueError("exact filter needs a discrete prior over the MDP's domains")
    like = mdp.P[:, s, a, s_next]
    post = like * prior.weights
    z = post.sum()
    if z <= 0:
        warnings.warn(f"transition ({s}, {a}, {s_next}) has zero likelihood under every "
                      "domain with prior mass; keeping the prior", FilterWarning, stacklevel=2)
        return Posterior(weights=prior.weights, degenerate=True)
    return Posterior(weights=post / z)


def bayes_filter(prior: Posterior, mdp: MultiDomainMDP, transitions) -> list[Posterior]:
    """Filter a sequence of ``(s, a, s')``; returns the belief after each step."""
    out, post = [], prior
    for s, a, s2 in transitions:
        post = bayes_filter_step(post, mdp, int(s), int(a), int(s2))
        out.append(post)
    return out


def posterior_moments(post: Posterior, mdp: MultiDomainMDP) -> Posterior:
    """Mean/std in kappa space of a discrete posterior (population convention)."""
    K = mdp.kappas
    mu = post.weights @ K
    var = post.weights @ (K - mu) ** 2
    return Posterior.box(mu, np.sqrt(np.maximum(var, 0.0)))


def filter_rollouts(mdp: MultiDomainMDP, domain: int, policy: np.ndarray, episodes: int,
                    steps: int, rng: np.random.Generator, restart_absorbing: bool = False) -> np.ndarray:
    """Posterior mass on ``domain`` after each step of ``episodes`` exact-filter rollouts.

    The policy is ``[S, A]``.  With ``restart_absorbing`` the walk restarts from
    the initial distribution when it sits in an absorbing state (where
    every domain agrees and nothing is learned); the belief carries over.
    Returns ``[episodes, steps]``.
    """
    P = mdp.P
    S = mdp.n_states
    absorbing = np.all(P[domain, np.arange(S), :, np.arange(S)] == 1.0, axis=1)
    logw = np.zeros((episodes, mdp.n_domains)) - math.log(mdp.n_domains)
    s = rng.choice(S, size=episodes, p=mdp.initial_dist)
    out = np.empty((episodes, steps))
    cum_pi = np.cumsum(policy, axis=1)
    cum_P = np.cumsum(P[domain], axis=-1)
    for t in range(steps):
        if restart_absorbing:
            stuck = absorbing[s]
            if stuck.any():
                s[stuck] = rng.choice(S, size=int(stuck.sum()), p=mdp.initial_dist)
        a = np.minimum((rng.random(episodes)[:, None] > cum_pi[s]).sum(1), mdp.n_actions - 1)
        s2 = np.minimum((rng.random(episodes)[:, None] > cum_P[s, a]).sum(1), S - 1)
        like = P[:, s, a, s2].T                      # [episodes, K]
        with np.errstate(divide="ignore"):
            logw = logw + np.log(like)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        out[:, t] = w[:, domain]
        s = s2
    return out


@dataclass
class DynamicsModel:
    """Smoothed empirical next-state model per ``(domain, state, action)``."""

    counts: np.ndarray                    # [K, S, A, S]
    kappas: np.ndarray                    # [K, d]
    pseudo_count: float = PSEUDO_COUNT

    @classmethod
    def empty(cls, mdp: MultiDomainMDP, pseudo_count: float = PSEUDO_COUNT) -> "DynamicsModel":
        S, A = mdp.n_states, mdp.n_actions
        return cls(np.zeros((mdp.n_domains, S, A, S)), np.array(mdp.kappas), pseudo_count)

    def observe(self, domain, s, a, s_next) -> None:
        np.add.at(self.counts, (np.asarray(domain), np.asarray(s), np.asarray(a), np.asarray(s_next)), 1.0)

    @property
    def probs(self) -> np.ndarray:
        c = self.counts + self.pseudo_count
        return c / c.sum(axis=-1, keepdims=True)

    def likelihood(self, kappa, s, a, s_next) -> tuple[np.ndarray, np.ndarray]:
        """``D(s'|s,a,kappa)`` and its derivative in kappa (first coordinate).

        One-dimensional kappa interpolates linearly between the known
        domains (exact for kernels that are affine in kappa) and clamps
        outside them; higher dimensions use the nearest domain.
        """
        kappa = np.asarray(kappa, float)
        p = self.probs[:, s, a, s_next]                # [K, B]
        if self.kappas.shape[1] == 1:
            k = self.kappas[:, 0]
            order = np.argsort(k)
            k, p = k[order], p[order]
            x = kappa[..., 0] if kappa.ndim > 1 else kappa
            if len(k) == 1:
                return p[0] * np.ones_like(x), np.zeros_like(x)
            j = np.clip(np.searchsorted(k, x) - 1, 0, len(k) - 2)
            cols = np.arange(p.shape[1]) if p.ndim > 1 else None
            pick = (lambda r: p[r, cols]) if cols is not None else (lambda r: p[r])
            lo, hi = pick(j), pick(j + 1)
            span = k[j + 1] - k[j]
            slope = (hi - lo) / span
            inside = (x >= k[0]) & (x <= k[-1])
            xc = np.clip(x, k[0], k[-1])
            val = lo + slope * (xc - k[j])
            return val, np.where(inside, slope, 0.0)
        d = np.linalg.norm(kappa[..., None, :] - self.kappas, axis=-1)
        near = np.argmin(d, axis=-1)
        return p[near, np.arange(p.shape[1])], np.zeros(near.shape)


def gaussian_kl(mu1, s1, mu0, s0, floor: float = SIGMA_FLOOR) -> np.ndarray:
    """``KL(N(mu1, s1^2) || N(mu0, s0^2))`` summed over coordinates."""
    s1 = np.maximum(np.asarray(s1, float), floor)
    s0 = np.maximum(np.asarray(s0, float), floor)
    t = np.log(s0 / s1) + (s1 ** 2 + (np.asarray(mu1) - mu0) ** 2) / (2 * s0 ** 2) - 0.5
    return t.sum(axis=-1)


@dataclass
class OSIBatch:
    """Transitions with the belief held before each one; ``mu``/``sigma`` are ``[B, d]``."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    domain: np.ndarray | None = None

    def __len__(self):
        return len(self.s)

    def subset(self, idx) -> "OSIBatch":
        dom = None if self.domain is None else self.domain[idx]
        return OSIBatch(self.s[idx], self.a[idx], self.s_next[idx], self.mu[idx], self.sigma[idx], dom)


def _expected_nll(dyn: DynamicsModel, batch: OSIBatch, mu, sigma):
    """``E_{k~N(mu, sigma)}[-ln D]`` per item and its derivative in ``mu`` (Gauss-Hermite)."""
    x = mu[:, :1] + np.maximum(sigma[:, :1], 0.0) * _GH_X[None, :]         # [B, G]
    B, G = x.shape
    rep = lambda v: np.repeat(v, G)
    D, dD = dyn.likelihood(x.reshape(-1, 1), rep(batch.s), rep(batch.a), rep(batch.s_next))
    D, dD = D.reshape(B, G), dD.reshape(B, G)
    if np.any(D <= 0):
        return np.full(B, np.inf), np.zeros(B)
    return (-np.log(D)) @ _GH_W, (-dD / D) @ _GH_W


def vae_loss(dynamics: DynamicsModel, posterior_new, posterior_old, batch: OSIBatch | None = None,
             mdp_transitions=None) -> float:
    """Reconstruction ``E_{k~new}[-ln D(s'|s,a,k)]`` plus ``KL[new || old]``.

    Discrete beliefs (``Posterior`` with weights, plus ``mdp_transitions`` as
    ``(s, a, s')``) use exact sums.  Box beliefs are arrays ``(mu, sigma)`` of
    shape ``[B, d]`` aligned with ``batch``; the reconstruction uses
    Gauss-Hermite quadrature and the KL is the Gaussian closed form with the
    new belief taken at the old belief's scale (the ensemble spread is an
    epistemic quantity, not the belief's width).  Returns ``inf`` when the
    observed next state is impossible under the new belief.
    """
    if isinstance(posterior_new, Posterior) and posterior_new.is_discrete:
        s, a, s2 = mdp_transitions
        w_new, w_old = posterior_new.weights, posterior_old.weights
        D = dynamics.probs[:, s, a, s2]
        live = w_new > 0
        if np.any(D[live] <= 0):
            return math.inf
        recon = float(-(w_new[live] * np.log(D[live])).sum())
        if np.any(w_old[live] <= 0):
            return math.inf
        kl = float((w_new[live] * np.log(w_new[live] / w_old[live])).sum())
        return recon + kl
    mu1, s1 = (np.asarray(v, float) for v in posterior_new)
    nll, _ = _expected_nll(dynamics, batch, mu1, s1)
    kl = gaussian_kl(mu1, batch.sigma, batch.mu, batch.sigma)
    return float(np.mean(nll + kl))


def _one_hot(idx, n):
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


@dataclass
class EnsembleOSI:
    """``k`` two-layer tanh regressors ``(s, a, s', mu, sigma) -> kappa``.

    Outputs are squashed into ``kappa_range`` by a sigmoid.
    """

    n_states: int
    n_actions: int
    kappa_range: tuple[float, float]
    k: int = 4
    hidden: int = 32
    dim: int = 1
    seed: int = 0
    params: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.params:
            rng = np.random.default_rng(self.seed)
            n_in = 2 * self.n_states + self.n_actions + 2 * self.dim
            self.params = [{
                "W1": rng.normal(0, 1 / math.sqrt(n_in), (n_in, self.hidden)),
                "b1": rng.normal(0, 0.5, self.hidden),
                "W2": rng.normal(0, 1.5 / math.sqrt(self.hidden), (self.hidden, self.dim)),
                "b2": rng.normal(0, 1.0, self.dim),
            } for _ in range(self.k)]

    @property
    def span(self) -> float:
        lo, hi = self.kappa_range
        return hi - lo

    def features(self, s, a, s_next, mu, sigma) -> np.ndarray:
        lo, _ = self.kappa_range
        mu = np.atleast_2d(np.asarray(mu, float))
        sigma = np.atleast_2d(np.asarray(sigma, float))
        return np.hstack([_one_hot(np.atleast_1d(s), self.n_states),
                          _one_hot(np.atleast_1d(a), self.n_actions),
                          _one_hot(np.atleast_1d(s_next), self.n_states),
                          (mu - lo) / self.span, sigma / self.span])

    def _forward(self, j: int, X: np.ndarray):
        p = self.params[j]
        h = np.tanh(X @ p["W1"] + p["b1"])
        z = h @ p["W2"] + p["b2"]
        sig = 1.0 / (1.0 + np.exp(-z))
        return self.kappa_range[0] + self.span * sig, (h, sig)

    def member_predictions(self, s, a, s_next, mu, sigma) -> np.ndarray:
        """``[k, B, d]`` kappa estimates."""
        X = self.features(s, a, s_next, mu, sigma)
        return np.stack([self._forward(j, X)[0] for j in range(self.k)])


def ensemble_predict(osi: EnsembleOSI, s, a, s_next, prior: Posterior | tuple) -> Posterior:
    """Mean and population std of the members' predictions."""
    mu, sigma = (prior.mu, prior.sigma) if isinstance(prior, Posterior) else prior
    preds = osi.member_predictions(s, a, s_next, mu, sigma)
    mean = preds.mean(axis=0)
    if osi.k < 2:
        warnings.warn("ensemble of fewer than 2 members: std undefined, reporting 0",
                      FilterWarning, stacklevel=2)
        std = np.zeros_like(mean)
        return Posterior(mu=np.squeeze(mean, 0) if mean.shape[0] == 1 else mean,
                         sigma=np.squeeze(std, 0) if std.shape[0] == 1 else std, degenerate=True)
    std = preds.std(axis=0)
    if mean.shape[0] == 1:
        mean, std = mean[0], std[0]
    return Posterior(mu=mean, sigma=std)


def ensemble_update(osi: EnsembleOSI, dynamics: DynamicsModel, batch: OSIBatch, lr: float,
                    rng: np.random.Generator, observe: bool = True, grad_clip: float = 50.0):
    """One SGD step on one uniformly drawn member.

    The member's prediction plays the belief mean in :func:`vae_loss`, with
    the current ensemble spread held fixed.  When ``observe`` is set and
    the batch carries domain labels, the dynamics counts absorb the batch
    first.  Returns ``(member index, loss before the step)``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if observe and batch.domain is not None:
        dynamics.observe(batch.domain, batch.s, batch.a, batch.s_next)
    j = int(rng.integers(osi.k))
    X = osi.features(batch.s, batch.a, batch.s_next, batch.mu, batch.sigma)
    preds = np.stack([osi._forward(i, X)[0] for i in range(osi.k)])
    spread = preds.std(axis=0)
    f, (h, sig) = osi._forward(j, X)
    nll, dnll = _expected_nll(dynamics, batch, f, spread)
    s0 = np.maximum(batch.sigma, SIGMA_FLOOR)
    kl = ((f - batch.mu) ** 2 / (2 * s0 ** 2)).sum(axis=1)
    loss = float(np.mean(nll + kl))
    g = np.zeros_like(f)
    g[:, 0] += dnll
    g += (f - batch.mu) / s0 ** 2
    g = np.clip(g, -grad_clip, grad_clip) / len(batch)
    gz = g * osi.span * sig * (1 - sig)
    p = osi.params[j]
    gh = (gz @ p["W2"].T) * (1 - h ** 2)
    p["W2"] -= lr * h.T @ gz
    p["b2"] -= lr * gz.sum(axis=0)
    p["W1"] -= lr * X.T @ gh
    p["b1"] -= lr * gh.sum(axis=0)
    return j, loss


def collect_osi_batch(mdp: MultiDomainMDP, n: int, rng: np.random.Generator,
                      osi: EnsembleOSI | None = None, prior: Posterior | None = None,
                      episode_len: int = 20) -> OSIBatch:
    """Random-policy transitions from uniformly drawn domains, with the belief
    propagated along each episode by ``osi`` (or by the exact filter's
    moments when ``osi`` is None)."""
    K, S, A = mdp.n_domains, mdp.n_states, mdp.n_actions
    if prior is None:
        lo, hi = float(mdp.kappas[:, 0].min()), float(mdp.kappas[:, 0].max())
        prior = Posterior.box([(lo + hi) / 2], [(hi - lo) / math.sqrt(12)])
    rows = []
    while len(rows) < n:
        dom = int(rng.integers(K))
        s = int(rng.choice(S, p=mdp.initial_dist))
        mu, sig = np.array(prior.mu, float), np.array(prior.sigma, float)
        exact = Posterior.uniform(K)
        for _ in range(episode_len):
            a = int(rng.integers(A))
            s2 = int(rng.choice(S, p=mdp.P[dom, s, a]))
            rows.append((s, a, s2, mu.copy(), sig.copy(), dom))
            if osi is not None:
                post = ensemble_predict(osi, s, a, s2, (mu[None], sig[None]))
            else:
                exact = bayes_filter_step(exact, mdp, s, a, s2)
                post = posterior_moments(exact, mdp)
            mu, sig = np.atleast_1d(post.mu).astype(float), np.atleast_1d(post.sigma).astype(float)
            s = s2
            if len(rows) >= n:
                break
    s, a, s2, mu, sig, dom = zip(*rows)
    return OSIBatch(np.array(s), np.array(a), np.array(s2), np.array(mu), np.array(sig), np.array(dom))


def write_belief_trace(path, beliefs: list[Posterior]) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        first = beliefs[0] if beliefs else None
        if first is None or first.is_discrete:
            n = 0 if first is None else len(first.weights)
            out.writerow(["step"] + [f"w{k}" for k in range(n)])
            for t, b in enumerate(beliefs):
                out.writerow([t] + [f"{x:.8f}" for x in b.weights])
        else:
            d = len(np.atleast_1d(first.mu))
            out.writerow(["step"] + [c for j in range(d) for c in (f"mu{j}", f"sigma{j}")])
            for t, b in enumerate(beliefs):
                vals = [v for pair in zip(np.atleast_1d(b.mu), np.atleast_1d(b.sigma)) for v in pair]
                out.writerow([t] + [f"{x:.8f}" for x in vals])
