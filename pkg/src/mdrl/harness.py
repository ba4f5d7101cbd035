"""Experiment configuration, CCS scoring and deterministic CSV reporting."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import trim_mean

from .dp_solvers import SOLVERS, ConvergenceWarning, solve
from .envs import get_env
from .osi import (DynamicsModel, EnsembleOSI, OSIBatch, Posterior, bayes_filter_step, ensemble_predict,
                  ensemble_update, collect_osi_batch)
from .pmomdp import MultiDomainMDP, Preference, PreferenceGrid, horizon_for, make_grid, monte_carlo_returns
from .rl_loop import VARIANTS, TrainConfig, box_to_weights, project_to_grid, run_training

log = logging.getLogger(__name__)

DP_ALGOS = ("dr",) + tuple(SOLVERS)
RESULT_COLUMNS = ("algo", "seed", "pref_id", "score", "stderr", "iqm", "iqr", "status")


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """Counter-based generator for the stream ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *path])))


def _f(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.8f}"


@dataclass
class Score:
    mean: float
    stderr: float
    iqm: float
    iqr: float
    samples: np.ndarray


def summarize(samples) -> Score:
    x = np.asarray(samples, float)
    if x.size == 0:
        raise ValueError("no samples")
    q1, q3 = np.percentile(x, [25, 75])
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return Score(float(x.mean()), se, float(trim_mean(x, 0.25)), float(q3 - q1), x)


def eval_weights(mdp: MultiDomainMDP, pref: Preference) -> tuple[MultiDomainMDP, np.ndarray]:
    """Scoring domains and their weights under ``pref``.

    With held-out domains, a box preference weights them equally when its
    support covers them (they are its own sigma points) and otherwise
    spreads its mass onto them by interpolation; without held-out domains
    the training domains are scored with the preference's weights.
    """
    view = mdp.evaluation_view() if mdp.eval_domains else mdp
    if pref.is_discrete:
        if len(pref.weights) != view.n_domains:
            raise ValueError("discrete preference does not match the scoring domains")
        return view, pref.weights
    return view, box_to_weights(pref, view.kappas)


def ccs_score(policy: np.ndarray, grid: PreferenceGrid, mdp: MultiDomainMDP, pref: Preference,
              trials: int, rng: np.random.Generator, train_kappas: np.ndarray | None = None,
              horizon: int | None = None) -> Score:
    """Preference-weighted discounted return of the policy conditioned on ``pref``.

    Each trial runs one episode per scoring domain; the trial's sample is
    the weighted mean of those returns.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    kap = mdp.kappas if train_kappas is None else train_kappas
    cell = project_to_grid(pref, grid, kap)
    view, w = eval_weights(mdp, pref)
    H = horizon or horizon_for(mdp.gamma, 1e-12)
    per = np.zeros(trials)
    for k in range(view.n_domains):
        if w[k] == 0:
            continue
        per += w[k] * monte_carlo_returns(view, policy[cell], k, trials, H, rng)
    return summarize(per)


# ---------------------------------------------------------------------------
# experiment config


def default_eval_prefs(env_name: str, mdp: MultiDomainMDP, lo: float, hi: float) -> list[dict]:
    """Eleven evaluation preferences: grid cells for two discrete domains,
    otherwise boxes of half-width 0.1 centred along the kappa range."""
    if mdp.n_domains == 2 and not mdp.eval_domains:
        return [{"weights": list(map(float, c))} for c in make_grid(2, 10).cells]
    out = []
    for i in range(11):
        c = lo + (hi - lo) * i / 10
        out.append({"lo": max(lo, c - 0.1), "hi": min(hi, c + 0.1)})
    return out


def pref_from_dict(d: dict) -> Preference:
    if "weights" in d:
        return Preference.discrete(d["weights"])
    if "lo" in d:
        return Preference.from_bounds(d["lo"], d["hi"])
    return Preference.uniform_box(d["mu"], d["sigma"])


@dataclass
class ExperimentConfig:
    env: str = "two-domain-chain"
    env_params: dict = field(default_factory=dict)
    algos: list[str] = field(default_factory=lambda: ["dr", "cmdrl"])
    seeds: list[int] = field(default_factory=lambda: list(range(8)))
    grid_resolution: int | None = None
    alpha: float = 0.05
    gamma: float | None = None
    sigma_orders: list[int] = field(default_factory=list)
    trials: int = 100
    out_dir: str = "results"
    eval_prefs: list[dict] | None = None
    train: dict = field(default_factory=dict)
    tol: float = 1e-8

    def __post_init__(self):
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for a in self.algos:
            if a not in DP_ALGOS and a not in VARIANTS:
                raise ValueError(f"unknown algo {a!r}")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def build_env(self) -> MultiDomainMDP:
        params = dict(self.env_params)
        if self.gamma is not None:
            params["gamma"] = self.gamma
        return get_env(self.env).build(**params)


def _policy_for(algo: str, mdp: MultiDomainMDP, grid: PreferenceGrid, cfg: ExperimentConfig, seed: int):
    if algo in DP_ALGOS:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            return solve(algo, mdp, grid, cfg.alpha, cfg.tol).policy
    tc = TrainConfig(**{**cfg.train, "variant": algo, "seed": seed, "alpha": cfg.alpha})
    return run_training(mdp, tc, grid).policy


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Score every (algo, seed) at every evaluation preference.

    Writes ``results.csv`` (one row per algo, seed and preference) and
    ``summary.csv`` (one row per preference; per algo the interquartile
    mean and range over the pooled trials of all seeds).  Failures are
    recorded in the ``status`` column and the run continues.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mdp = cfg.build_env()
    spec = get_env(cfg.env)
    grid = make_grid(mdp.n_domains, cfg.grid_resolution)
    lo, hi = spec.kappa_range
    prefs = [pref_from_dict(p) for p in (cfg.eval_prefs or default_eval_prefs(cfg.env, mdp, lo, hi))]
    pooled: dict[tuple[str, int], list[np.ndarray]] = {}
    rows = []
    for ai, algo in enumerate(cfg.algos):
        for seed in cfg.seeds:
            try:
                policy = _policy_for(algo, mdp, grid, cfg, seed)
            except Exception as exc:  # recorded, not fatal
                log.warning("%s seed %d failed: %s", algo, seed, exc)
                rows += [[algo, seed, i, "nan", "nan", "nan", "nan", f"error: {exc}"] for i in range(len(prefs))]
                continue
            for i, pref in enumerate(prefs):
                sc = ccs_score(policy, grid, mdp, pref, cfg.trials, rng_for(seed, ai, i))
                pooled.setdefault((algo, i), []).append(sc.samples)
                rows.append([algo, seed, i, _f(sc.mean), _f(sc.stderr), _f(sc.iqm), _f(sc.iqr), "ok"])
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        w.writerows(rows)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pref_id"] + [f"{a}_{m}" for a in cfg.algos for m in ("iqm", "iqr")])
        for i in range(len(prefs)):
            line = [i]
            for a in cfg.algos:
                if (a, i) in pooled:
                    s = summarize(np.concatenate(pooled[(a, i)]))
                    line += [_f(s.iqm), _f(s.iqr)]
                else:
                    line += ["nan", "nan"]
            w.writerow(line)
    return out


# ---------------------------------------------------------------------------
# identification during deployment

OSI_MODES = ("fixed-full", "exact-bayes", "ensemble")


@dataclass
class OSIEpisode:
    mode: str
    domain: int
    ret: float
    final_belief: np.ndarray


def train_ensemble(mdp: MultiDomainMDP, transitions: int, rng: np.random.Generator,
                   epochs: int = 20, lr: float = 0.05, batch: int = 256, seed: int = 0):
    """Fit an identifier ensemble on random-policy transitions."""
    lo, hi = float(mdp.kappas[:, 0].min()), float(mdp.kappas[:, 0].max())
    osi = EnsembleOSI(mdp.n_states, mdp.n_actions, (lo, hi), seed=seed)
    dyn = DynamicsModel.empty(mdp)
    data = collect_osi_batch(mdp, transitions, rng)
    dyn.observe(data.domain, data.s, data.a, data.s_next)
    for _ in range(epochs):
        for i in range(0, len(data), batch):
            ensemble_update(osi, dyn, data.subset(np.arange(i, min(i + batch, len(data)))), lr, rng,
                            observe=False)
    return osi, dyn


def evaluate_with_osi(policy: np.ndarray, grid: PreferenceGrid, mdp: MultiDomainMDP, mode: str,
                      episodes: int, rng: np.random.Generator, steps: int = 50,
                      osi: EnsembleOSI | None = None) -> list[OSIEpisode]:
    """Roll out the universal policy while conditioning it on a belief.

    ``fixed-full`` keeps the full-uncertainty belief; ``exact-bayes`` and
    ``ensemble`` update it after every transition.  Episodes cycle through
    the true domains.
    """
    if mode not in OSI_MODES:
        raise ValueError(f"unknown mode {mode!r}; known: {OSI_MODES}")
    if mode == "ensemble" and osi is None:
        raise ValueError("ensemble mode needs a trained identifier")
    K, S, A = mdp.n_domains, mdp.n_states, mdp.n_actions
    lo, hi = float(mdp.kappas[:, 0].min()), float(mdp.kappas[:, 0].max())
    full_w = np.full(K, 1.0 / K)
    full_box = (np.array([(lo + hi) / 2]), np.array([(hi - lo) / math.sqrt(12)]))
    cum_P = np.cumsum(mdp.P, axis=-1)
    out = []
    for ep in range(episodes):
        k = ep % K
        s = int(min(np.searchsorted(np.cumsum(mdp.initial_dist), rng.random(), side="right"), S - 1))
        post = Posterior.uniform(K)
        box = full_box
        cell = grid.nearest(full_w)
        ret, disc = 0.0, 1.0
        for _ in range(steps):
            a = int(min(np.searchsorted(np.cumsum(policy[cell, s]), rng.random(), side="right"), A - 1))
            s2 = int(min(np.searchsorted(cum_P[k, s, a], rng.random(), side="right"), S - 1))
            ret += disc * mdp.R[k, s, a]
            disc *= mdp.gamma
            if mode == "exact-bayes":
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    post = bayes_filter_step(post, mdp, s, a, s2)
                cell = grid.nearest(post.weights)
            elif mode == "ensemble":
                p = ensemble_predict(osi, s, a, s2, (box[0][None], box[1][None]))
                box = (np.atleast_1d(p.mu), np.atleast_1d(p.sigma))
                cell = project_to_grid(Posterior.box(*box), grid, mdp.kappas)
            s = s2
        belief = post.weights if mode != "ensemble" else np.concatenate(box)
        out.append(OSIEpisode(mode, k, float(ret), np.asarray(belief, float)))
    return out


def osi_tendency(by_mode: dict[str, list[OSIEpisode]], baseline: str = "fixed-full") -> list[list]:
    """Per mode: number of domains whose mean return rose or fell against ``baseline``."""
    def means(eps):
        doms = sorted({e.domain for e in eps})
        return {d: float(np.mean([e.ret for e in eps if e.domain == d])) for d in doms}
    base = means(by_mode[baseline])
    rows = []
    for mode, eps in by_mode.items():
        if mode == baseline:
            continue
        m = means(eps)
        up = sum(m[d] > base[d] for d in base)
        down = sum(m[d] < base[d] for d in base)
        rows.append([mode, up, down])
    return rows


def write_osi_csv(by_mode: dict[str, list[OSIEpisode]], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n = max(len(e.final_belief) for eps in by_mode.values() for e in eps)
        w.writerow(["mode", "episode", "domain", "return"] + [f"belief{j}" for j in range(n)])
        for mode, eps in by_mode.items():
            for i, e in enumerate(eps):
                b = list(e.final_belief) + [float("nan")] * (n - len(e.final_belief))
                w.writerow([mode, i, e.domain, _f(e.ret)] + [_f(x) for x in b])
    with open(out / "tendency.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "increase", "decrease"])
        w.writerows(osi_tendency(by_mode))
