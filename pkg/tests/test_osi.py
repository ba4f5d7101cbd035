from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from mdrl.envs import build_two_domain_chain
from mdrl.osi import (DynamicsModel, EnsembleOSI, FilterWarning, OSIBatch, Posterior, bayes_filter,
                      bayes_filter_step, collect_osi_batch, ensemble_predict, ensemble_update,
                      filter_rollouts, gaussian_kl, posterior_moments, vae_loss, write_belief_trace)


def test_identical_kernels_keep_prior():
    mdp = build_two_domain_chain(slip_a=0.3, slip_b=0.3)
    prior = Posterior(weights=np.array([0.2, 0.8]))
    assert np.allclose(bayes_filter_step(prior, mdp, 1, 0, 0).weights, [0.2, 0.8])


def test_nine_to_one(chain):
    assert bayes_filter_step(Posterior.uniform(2), chain, 0, 1, 1).weights.tolist() == [0.9, 0.1]


def test_deterministic_transition_is_decisive():
    mdp = build_two_domain_chain(slip_a=0.0, slip_b=1.0)
    assert bayes_filter_step(Posterior.uniform(2), mdp, 1, 1, 2).weights.tolist() == [1.0, 0.0]


def test_impossible_transition_warns_and_keeps_prior(chain):
    with pytest.warns(FilterWarning):
        post = bayes_filter_step(Posterior.uniform(2), chain, 0, 1, 3)
    assert post.degenerate and np.allclose(post.weights, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 1)), min_size=2, max_size=6))
def test_filter_order_consistency(steps):
    mdp = build_two_domain_chain(slip_a=0.2, slip_b=0.7)
    rng = np.random.default_rng(len(steps))
    trans = [(s, a, int(rng.choice(5, p=mdp.P[0, s, a]))) for s, a in steps]
    joint = Posterior.uniform(2).weights * np.prod([mdp.P[:, s, a, t] for s, a, t in trans], axis=0)
    seq = bayes_filter(Posterior.uniform(2), mdp, trans)[-1]
    assert np.allclose(seq.weights, joint / joint.sum())


def test_entropy_non_increasing_in_expectation(chain):
    pi = np.full((chain.n_states, 2), 0.5)
    for k in range(2):
        w = filter_rollouts(chain, k, pi, 1000, 30, np.random.default_rng([3, k]))
        p = np.column_stack([np.full(1000, 0.5), w])
        h = -(p * np.log(np.clip(p, 1e-300, 1)) + (1 - p) * np.log(np.clip(1 - p, 1e-300, 1)))
        means = h.mean(axis=0)
        se = h.std(axis=0) / math.sqrt(1000)
        assert np.all(np.diff(means) <= 3 * se[1:])


def test_posterior_moments(chain):
    m = posterior_moments(Posterior.uniform(2), chain)
    assert m.mu[0] == pytest.approx(0.5) and m.sigma[0] == pytest.approx(0.4)


def _osi(k=4, seed=0):
    return EnsembleOSI(5, 2, (0.1, 0.9), k=k, seed=seed)


def test_identical_members_have_zero_std():
    osi = _osi()
    osi.params = [{n: v.copy() for n, v in osi.params[0].items()} for _ in range(4)]
    single = osi.member_predictions(0, 1, 1, [0.5], [0.2])[0]
    p = ensemble_predict(osi, 0, 1, 1, Posterior.box(0.5, 0.2))
    assert np.allclose(p.sigma, 0) and np.allclose(p.mu, single[0])


def test_two_member_population_std():
    osi = EnsembleOSI(5, 2, (0.0, 1.0), k=2, seed=0)
    for j, b in enumerate((-40.0, 40.0)):
        osi.params[j]["W2"][:] = 0.0
        osi.params[j]["b2"][:] = b
    p = ensemble_predict(osi, 0, 1, 1, Posterior.box(0.5, 0.2))
    assert p.mu[0] == pytest.approx(0.5) and p.sigma[0] == pytest.approx(0.5, abs=1e-12)


def test_single_member_warns():
    with pytest.warns(FilterWarning):
        p = ensemble_predict(_osi(k=1), 0, 1, 1, Posterior.box(0.5, 0.2))
    assert p.degenerate


def test_member_permutation_invariance():
    osi = _osi()
    batch = ([0, 1, 2], [1, 0, 1], [1, 0, 3], np.full((3, 1), 0.5), np.full((3, 1), 0.2))
    a = ensemble_predict(osi, *batch[:3], batch[3:])
    osi.params = osi.params[::-1]
    b = ensemble_predict(osi, *batch[:3], batch[3:])
    assert np.allclose(a.mu, b.mu, atol=1e-15) and np.allclose(a.sigma, b.sigma, atol=1e-15)


def test_gaussian_kl_zero_on_equal():
    assert gaussian_kl(np.array([0.3]), np.array([0.1]), np.array([0.3]), np.array([0.1])) == 0.0


def test_vae_loss_discrete_terms(chain):
    dyn = DynamicsModel.empty(chain, pseudo_count=0.0)
    dyn.counts[:] = chain.P
    prior = Posterior.uniform(2)
    assert vae_loss(dyn, prior, prior, mdp_transitions=(0, 1, 1)) == pytest.approx(
        -0.5 * (math.log(0.9) + math.log(0.1)))
    det = build_two_domain_chain(slip_a=0.0, slip_b=1.0)
    ddyn = DynamicsModel.empty(det, pseudo_count=0.0)
    ddyn.counts[:] = det.P
    onehot = Posterior(weights=np.array([1.0, 0.0]))
    assert vae_loss(ddyn, onehot, onehot, mdp_transitions=(1, 1, 2)) == 0.0


def test_likelihood_interpolates_linearly(chain):
    dyn = DynamicsModel.empty(chain, pseudo_count=0.0)
    dyn.counts[:] = chain.P
    val, slope = dyn.likelihood(np.array([[0.5]]), np.array([0]), np.array([1]), np.array([1]))
    assert val[0] == pytest.approx(0.5) and slope[0] == pytest.approx(-1.0)


def test_dynamics_rows_are_distributions(chain):
    dyn = DynamicsModel.empty(chain)
    dyn.observe([0, 1, 1], [0, 2, 2], [1, 0, 0], [1, 1, 3])
    assert np.allclose(dyn.probs.sum(axis=-1), 1)


def test_member_choice_is_uniform(chain):
    osi = _osi()
    rng = np.random.default_rng(0)
    dyn = DynamicsModel.empty(chain)
    b = OSIBatch(np.array([0]), np.array([1]), np.array([1]), np.full((1, 1), 0.5), np.full((1, 1), 0.2))
    counts = np.bincount([ensemble_update(osi, dyn, b, 0.0, rng)[0] for _ in range(10_000)], minlength=4)
    assert chisquare(counts).pvalue > 0.001


def test_zero_gradient_leaves_parameters(chain):
    osi = _osi()
    before = [{n: v.copy() for n, v in p.items()} for p in osi.params]
    b = OSIBatch(np.array([0]), np.array([1]), np.array([1]), np.full((1, 1), 0.5), np.full((1, 1), 0.2))
    ensemble_update(osi, DynamicsModel.empty(chain), b, 0.0, np.random.default_rng(0))
    for p0, p1 in zip(before, osi.params):
        assert all(np.allclose(p0[n], p1[n], atol=1e-12, rtol=0) for n in p0)


def test_regression_error_decreases(chain):
    rng = np.random.default_rng(2)
    data = collect_osi_batch(chain, 4000, rng)
    dyn = DynamicsModel.empty(chain)
    dyn.observe(data.domain, data.s, data.a, data.s_next)
    osi = _osi(seed=2)
    truth = chain.kappas[data.domain, 0]

    def err():
        p = ensemble_predict(osi, data.s, data.a, data.s_next, (data.mu, data.sigma))
        return float(np.mean((np.ravel(p.mu) - truth) ** 2))

    e0 = err()
    for _ in range(10):
        for i in range(0, len(data), 256):
            ensemble_update(osi, dyn, data.subset(np.arange(i, min(i + 256, len(data)))), 0.05, rng,
                            observe=False)
    assert err() < e0


def test_belief_trace_csv(tmp_path, chain):
    trace = bayes_filter(Posterior.uniform(2), chain, [(0, 1, 1), (1, 1, 2)])
    write_belief_trace(tmp_path / "b.csv", trace)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "step,w0,w1" and lines[1] == "0,0.90000000,0.10000000"
