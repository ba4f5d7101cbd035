from __future__ import annotations

import csv

import numpy as np
import pytest

from mdrl.dp_solvers import solve
from mdrl.envs import build_two_domain_chain
from mdrl.harness import (OSI_MODES, ExperimentConfig, ccs_score, evaluate_with_osi, osi_tendency, rng_for,
                          run_experiment, summarize, write_osi_csv)
from mdrl.pmomdp import Preference, horizon_for, initial_value, make_grid, monte_carlo_returns, policy_value_exact


def test_rng_streams_are_reproducible_and_distinct():
    assert rng_for(3, 1).random() == rng_for(3, 1).random()
    assert rng_for(3, 1).random() != rng_for(3, 2).random()


def test_summarize():
    s = summarize(np.arange(8.0))
    assert s.mean == 3.5 and s.iqm == pytest.approx(3.5) and s.iqr == pytest.approx(3.5)
    with pytest.raises(ValueError):
        summarize([])


def test_deterministic_score_equals_dp_value():
    mdp = build_two_domain_chain(slip_a=0.0, slip_b=0.0)
    grid = make_grid(2)
    pol = np.zeros((len(grid), 5, 2))
    pol[..., 1] = 1.0
    sc = ccs_score(pol, grid, mdp, Preference.discrete([0.5, 0.5]), 1, rng_for(0))
    exact = initial_value(mdp, policy_value_exact(mdp, pol[0])) @ [0.5, 0.5]
    assert sc.mean == pytest.approx(exact, abs=1e-9)


def test_delta_score_is_single_domain_return(chain):
    res = solve("cmdrl", chain)
    grid = res.grid
    sc = ccs_score(res.policy, grid, chain, Preference.delta(1, 2), 200, rng_for(1))
    ref = monte_carlo_returns(chain, res.policy[grid.index_of([0, 1])], 1, 200,
                              horizon_for(chain.gamma, 1e-12), rng_for(1))
    assert np.allclose(sc.samples, ref)


def test_conditioned_beats_dr_at_every_cell(chain):
    cm, dr = solve("cmdrl", chain), solve("dr", chain)
    for c, w in enumerate(cm.grid.cells):
        a = ccs_score(cm.policy, cm.grid, chain, Preference.discrete(w), 400, rng_for(2, c))
        b = ccs_score(dr.policy, dr.grid, chain, Preference.discrete(w), 400, rng_for(2, c))
        assert a.mean >= b.mean - 1e-3 - 3 * np.hypot(a.stderr, b.stderr)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=[1, 1])
    with pytest.raises(ValueError):
        ExperimentConfig(trials=0)
    with pytest.raises(ValueError):
        ExperimentConfig(algos=["ppo"])


def test_empty_algo_list(tmp_path):
    out = run_experiment(ExperimentConfig(algos=[], seeds=[0]), tmp_path)
    assert (out / "results.csv").read_text() == "algo,seed,pref_id,score,stderr,iqm,iqr,status\n"
    with open(out / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["pref_id"] and len(rows) == 12


def test_experiment_tree_is_deterministic_and_ordered(tmp_path):
    cfg = ExperimentConfig(algos=["dr", "cmdrl"], seeds=[0, 1], trials=10)
    a, b = run_experiment(cfg, tmp_path / "a"), run_experiment(cfg, tmp_path / "b")
    for name in ("results.csv", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    header = (a / "summary.csv").read_text().splitlines()[0]
    assert header == "pref_id,dr_iqm,dr_iqr,cmdrl_iqm,cmdrl_iqr"


def test_identical_domains_score_equal_across_modes():
    mdp = build_two_domain_chain(slip_a=0.3, slip_b=0.3)
    pol = solve("cmdrl", mdp).policy
    grid = make_grid(2)
    rets = {m: [e.ret for e in evaluate_with_osi(pol, grid, mdp, m, 50, rng_for(4), 30)]
            for m in OSI_MODES[:2]}
    assert rets["fixed-full"] == rets["exact-bayes"]


def test_exact_bayes_concentrates(chain):
    pol = solve("cmdrl", chain).policy
    eps = evaluate_with_osi(pol, make_grid(2), chain, "exact-bayes", 200, rng_for(5), 50)
    hit = np.mean([e.final_belief[e.domain] >= 0.99 for e in eps])
    assert hit >= 0.9


def test_tendency_table(tmp_path, chain):
    pol = solve("cmdrl", chain).policy
    by = {m: evaluate_with_osi(pol, make_grid(2), chain, m, 20, rng_for(6), 20) for m in OSI_MODES[:2]}
    rows = osi_tendency(by)
    assert rows[0][0] == "exact-bayes" and rows[0][1] + rows[0][2] <= 2
    write_osi_csv(by, tmp_path)
    assert (tmp_path / "tendency.csv").read_text().startswith("mode,increase,decrease\n")
    with pytest.raises(ValueError):
        evaluate_with_osi(pol, make_grid(2), chain, "ensemble", 1, rng_for(0))
