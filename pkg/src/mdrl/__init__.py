"""Multi-domain soft reinforcement learning at desk scale.

Exact tabular solvers for preference-conditioned, envelope and utopia
Bellman variants over a pseudo-multi-objective MDP, coverage sets, sigma
points for uniform domain distributions, online system identification and
a small sample-based training loop.
"""
from .pmomdp import (DomainSpec, MultiDomainMDP, Preference, PreferenceGrid, load_mdp, make_grid,
                     policy_value_exact, save_mdp, validate_mdp)
from .utility import compute_ccs, compute_pcs, enumerate_policies_oracle, linear_utility, pareto_dominates
from .unscented import map_sigma_points, moment_residual, solve_sigma_points
from .dp_solvers import (envelope_filter, hierarchy_report, soft_policy, soft_value, solve, solve_cmdrl,
                         solve_dr, solve_emdrl, solve_umdrl_v1, solve_umdrl_v2)
from .osi import EnsembleOSI, Posterior, bayes_filter_step, ensemble_predict, ensemble_update, vae_loss
from .rl_loop import TrainConfig, run_training
from .envs import build_continuous_slip_chain, build_two_domain_chain

__version__ = "0.1.0"
