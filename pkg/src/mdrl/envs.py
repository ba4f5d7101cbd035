"""Built-in desk-scale multi-domain environments."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .pmomdp import DomainSpec, MultiDomainMDP, Preference, validate_mdp
from .unscented import SigmaPointSet, map_sigma_points, solve_train_eval_pair

log = logging.getLogger(__name__)

LEFT, RIGHT = 0, 1


def _decimal(x: float) -> float:
    # 1 - 0.9 is 0.09999999999999998 in binary; keep the decimal value the caller meant
    return float(f"{x:.15g}")


def slip_chain_domain(length: int, slip: float, step_cost: float, goal_reward: float) -> DomainSpec:
    """Chain of ``length`` states; the move succeeds w.p. ``1 - slip`` else goes the other way.

    The right end is an absorbing goal with zero reward.  Rewards are
    expected rewards: ``-step_cost`` per step plus ``goal_reward`` times the
    probability of entering the goal.
    """
    S, goal = length, length - 1
    T = np.zeros((S, 2, S))
    for s in range(goal):
        for a, step in ((LEFT, -1), (RIGHT, 1)):
            fwd = min(max(s + step, 0), goal)
            back = min(max(s - step, 0), goal)
            T[s, a, fwd] += _decimal(1.0 - slip)
            T[s, a, back] += slip
    T[goal, :, goal] = 1.0
    R = np.zeros((S, 2))
    R[:goal] = -step_cost + goal_reward * T[:goal, :, goal]
    return DomainSpec(np.array([slip]), T, R)


def build_two_domain_chain(length: int = 5, slip_a: float = 0.1, slip_b: float = 0.9,
                           step_cost: float = 0.01, goal_reward: float = 1.0,
                           gamma: float = 0.9) -> MultiDomainMDP:
    if length < 3:
        raise ValueError("chain length must be >= 3")
    for slip in (slip_a, slip_b):
        if not 0.0 <= slip <= 1.0:
            raise ValueError(f"slip {slip} outside [0, 1]")
    doms = tuple(slip_chain_domain(length, s, step_cost, goal_reward) for s in (slip_a, slip_b))
    return MultiDomainMDP(length, 2, doms, gamma)


def slips_for(sp: SigmaPointSet, box: Preference) -> np.ndarray:
    slips = map_sigma_points(sp, box)[:, 0]
    if np.any((slips < 0) | (slips > 1)):
        log.warning("mapped slips %s leave [0, 1]; clipping", slips)
    return np.clip(slips, 0.0, 1.0)


def build_continuous_slip_chain(length: int = 5, kappa_range: tuple[float, float] = (0.1, 0.9),
                                sigma_points: SigmaPointSet | None = None,
                                eval_points: SigmaPointSet | None = None,
                                pref: Preference | None = None, step_cost: float = 0.01,
                                goal_reward: float = 1.0, gamma: float = 0.9,
                                seed: int = 0) -> MultiDomainMDP:
    """Chain whose slip is uniform over ``kappa_range``, discretized by sigma points.

    Training domains come from ``sigma_points`` mapped through ``pref``
    (default: the full range); held-out domains come from ``eval_points``.
    """
    lo, hi = kappa_range
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError("kappa range must satisfy 0 <= lo < hi <= 1")
    if sigma_points is None or eval_points is None:
        train, held = solve_train_eval_pair(1, seed=seed)
        sigma_points = sigma_points or train
        eval_points = eval_points or held
    box = pref if pref is not None else Preference.from_bounds(lo, hi)
    make = lambda slip: slip_chain_domain(length, float(slip), step_cost, goal_reward)
    doms = tuple(make(s) for s in slips_for(sigma_points, box))
    evals = tuple(make(s) for s in slips_for(eval_points, box))
    return MultiDomainMDP(length, 2, doms, gamma, eval_domains=evals)


@dataclass(frozen=True)
class EnvSpec:
    name: str
    builder: Callable[..., MultiDomainMDP]
    params: dict = field(default_factory=dict)
    kappa_range: tuple[float, float] = (0.0, 1.0)

    def build(self, **overrides) -> MultiDomainMDP:
        mdp = self.builder(**{**self.params, **overrides})
        issues = validate_mdp(mdp)
        if issues:
            raise ValueError(f"{self.name}: invalid MDP: {issues}")
        return mdp

    @property
    def full_preference(self) -> Preference:
        return Preference.from_bounds(*self.kappa_range)


ENVS: dict[str, EnvSpec] = {
    "two-domain-chain": EnvSpec("two-domain-chain", build_two_domain_chain, {}, (0.1, 0.9)),
    "slip-chain": EnvSpec("slip-chain", build_continuous_slip_chain, {}, (0.1, 0.9)),
}


def get_env(name: str) -> EnvSpec:
    try:
        return ENVS[name]
    except KeyError:
        raise KeyError(f"unknown environment {name!r}; known: {sorted(ENVS)}") from None


def deterministic_chain_value(length: int, step_cost: float, goal_reward: float, gamma: float) -> float:
    """Optimal value from the left end of a slip-free chain."""
    steps = length - 1
    return goal_reward * gamma ** (steps - 1) - step_cost * (1 - gamma ** steps) / (1 - gamma)
