from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdrl.dp_solvers import soft_policy, soft_value
from mdrl.pmomdp import Preference, make_grid
from mdrl.rl_loop import (VARIANTS, ReplayBuffer, TrainConfig, actor_update, box_to_weights, critic_update,
                          nearest_cells, polyak_update, project_to_grid, run_training, sirsa_sample_subsets,
                          td_target)


def _batch(**kw):
    b = {"s": np.array([0]), "a": np.array([1]), "r": np.array([0.7]), "s2": np.array([1]),
         "k": np.array([0]), "cell": np.array([0]), "next_cell": np.array([0]),
         "delta_cell": np.array([0, 1])}
    b.update(kw)
    return b


def _tables(C=2, K=2, S=2, A=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(2, C, K, S, A)), rng.dirichlet(np.ones(A), (C, S))


def test_replay_capacity_and_age():
    buf = ReplayBuffer(5)
    for i in range(12):
        buf.add(i % 3, 0, float(i), 0, 0, 0)
    assert len(buf) == 5 and buf.inserted == 12
    assert buf.stamp.min() >= buf.inserted - buf.capacity
    idx = buf.sample(4, np.random.default_rng(0))
    assert len(set(idx.tolist())) == 4
    assert len(buf.sample(50, np.random.default_rng(0))) == 5


@pytest.mark.parametrize("variant", VARIANTS)
def test_gamma_zero_target_is_reward(variant):
    tq, pi = _tables()
    if variant in ("umdsac1", "umdsac2", "umdsirsa"):
        tq = tq[:, 0]
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert td_target(variant, _batch(), tq, pi, W, 0.1, 0.0)[0] == 0.7


def test_twin_min_and_manual_target():
    tq, pi = _tables()
    tq[1] = tq[0]
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    alpha, gamma = 0.1, 0.9
    y = td_target("cmdsac", _batch(), tq, pi, W, alpha, gamma)[0]
    p = pi[0, 1]
    manual = 0.7 + gamma * sum(p[a] * (tq[0, 0, 0, 1, a] - alpha * np.log(p[a])) for a in range(2))
    assert y == pytest.approx(manual, abs=1e-14)
    lit = td_target("cmdsac", _batch(), tq, pi, W, alpha, gamma, literal=True)[0]
    assert lit == pytest.approx(0.7 + gamma * p @ tq[0, 0, 0, 1], abs=1e-14)


def test_twin_min_never_exceeds_either():
    tq, pi = _tables(seed=3)
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = td_target("cmdsac", _batch(), tq, pi, W, 0.1, 0.9, literal=True)[0]
    for j in range(2):
        assert y <= 0.7 + 0.9 * pi[0, 1] @ tq[j, 0, 0, 1] + 1e-12


def test_critic_zero_error_and_lr_one():
    q = np.zeros((2, 3))
    q[:, 1] = 2.0
    q2, loss = critic_update(q.copy(), np.array([1]), np.array([2.0]), 0.5)
    assert np.array_equal(q2, q) and np.all(loss == 0)
    q3, _ = critic_update(q.copy(), np.array([2]), np.array([-4.0]), 1.0)
    assert np.all(q3[:, 2] == -4.0)


def test_critic_loss_decreases_on_fixed_batch():
    q = np.zeros((2, 4))
    entries, targets = np.array([0, 1, 1, 3]), np.array([1.0, 2.0, 3.0, -1.0])
    losses = []
    for _ in range(100):
        q, loss = critic_update(q, entries, targets, 0.1)
        losses.append(loss.mean())
    assert np.all(np.diff(losses) <= 1e-15)


def test_actor_uniform_critics_and_shared_kernel():
    q = np.zeros((2, 2, 2, 3, 2))
    pi = np.random.default_rng(0).dirichlet(np.ones(2), (2, 3))
    W = np.array([[1.0, 0.0], [0.5, 0.5]])
    out, _ = actor_update(pi.copy(), q, W, [0, 1], [2, 0], 0.1)
    assert np.allclose(out[0, 2], 0.5) and np.allclose(out[1, 0], 0.5)
    q = np.random.default_rng(1).normal(size=(2, 2, 2, 3, 2))
    out, obj = actor_update(pi.copy(), q, W, [1], [2], 0.1)
    qbar = W[1] @ q.min(axis=0)[1, :, 2]
    assert np.allclose(out[1, 2], soft_policy(qbar, 0.1))
    before = pi[1, 2] @ (qbar - 0.1 * np.log(pi[1, 2]))
    assert obj == pytest.approx(soft_value(qbar, 0.1)) and obj >= before


def test_polyak_cases():
    t, o = np.array([0.0, 2.0]), np.array([2.0, 0.0])
    assert np.array_equal(polyak_update(t.copy(), o, 1.0), o)
    assert np.array_equal(polyak_update(t.copy(), o, 0.0), t)
    assert np.array_equal(polyak_update(np.array([0.0]), np.array([2.0]), 0.5), [1.0])
    with pytest.raises(ValueError):
        polyak_update(t, o, 1.5)


def test_subsets():
    full = Preference.from_bounds(0.1, 0.9)
    rng = np.random.default_rng(0)
    same = sirsa_sample_subsets(full, 1, rng, spread=0.0)[0]
    assert np.allclose(same.mu, full.mu) and np.allclose(same.sigma, full.sigma)
    subs = sirsa_sample_subsets(full, 100, rng)
    assert len(subs) == 100
    for p in subs:
        lo, hi = p.support
        assert lo[0] >= 0.1 - 1e-12 and hi[0] <= 0.9 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 0.9), st.floats(0.0, 0.2))
def test_box_weights_are_distributions_and_keep_mean(mu, sigma):
    k = np.array([[0.1], [0.5], [0.9]])
    w = box_to_weights(Preference.uniform_box([mu], [sigma]), k)
    assert np.all(w >= 0) and w.sum() == pytest.approx(1)
    half = np.sqrt(3) * sigma
    if 0.1 <= mu - half and mu + half <= 0.9:
        assert w @ k[:, 0] == pytest.approx(mu, abs=1e-9)


def test_projection_uses_grid_nearest():
    grid = make_grid(2)
    k = np.array([[0.1], [0.9]])
    w = np.array([[0.62, 0.38], [0.05, 0.95]])
    assert nearest_cells(grid, w).tolist() == [grid.nearest(x) for x in w]
    assert project_to_grid(Preference.from_bounds(0.1, 0.9), grid, k) == grid.index_of([0.5, 0.5])


def test_all_warmup_leaves_tables(chain):
    res = run_training(chain, TrainConfig(total_steps=300, warmup=300))
    assert np.all(res.q == 0) and np.allclose(res.policy, 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(variant="ppo")
    with pytest.raises(ValueError):
        TrainConfig(total_steps=10, warmup=20)
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_runs_and_is_deterministic(chain, tmp_path, variant):
    cfg = TrainConfig(total_steps=400, warmup=100, batch_size=32, variant=variant, seed=5,
                      sirsa_subsets=10)
    a, b = run_training(chain, cfg), run_training(chain, cfg)
    a.write_metrics(tmp_path / "a.csv")
    b.write_metrics(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert np.all(np.isfinite(a.q)) and np.allclose(a.policy.sum(-1), 1)
