"""Command-line entry point: ``mdrl <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import dp_solvers, harness, pmomdp, unscented, utility
from .envs import ENVS, get_env
from .rl_loop import VARIANTS, TrainConfig, run_training

log = logging.getLogger("mdrl")


def _f(x) -> str:
    return f"{float(x):.8f}"


def _writer(path: Path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _load_mdp(args) -> pmomdp.MultiDomainMDP:
    if getattr(args, "mdp", None):
        return pmomdp.load_mdp(args.mdp)
    return get_env(args.env).build()


def _read_config(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def write_policy_csv(path: Path, grid: pmomdp.PreferenceGrid, policy: np.ndarray) -> None:
    fh, w = _writer(path)
    with fh:
        K, A = grid.cells.shape[1], policy.shape[-1]
        w.writerow(["cell"] + [f"w{k}" for k in range(K)] + ["state"] + [f"p{a}" for a in range(A)])
        for c, cell in enumerate(grid.cells):
            for s in range(policy.shape[1]):
                w.writerow([c] + [_f(x) for x in cell] + [s] + [_f(p) for p in policy[c, s]])


def cmd_solve(args) -> int:
    mdp = _load_mdp(args)
    grid = pmomdp.make_grid(mdp.n_domains, args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", dp_solvers.ConvergenceWarning)
        res = dp_solvers.solve(args.algo, mdp, grid, args.alpha, args.tol, args.max_iter)
    for c in caught:
        log.warning("%s", c.message)
    fh, w = _writer(out / "q.csv")
    with fh:
        if res.conditioned:
            w.writerow(["cell", "domain", "state", "action", "q"])
            for idx in np.ndindex(res.q.shape):
                w.writerow(list(idx) + [_f(res.q[idx])])
        else:
            w.writerow(["domain", "state", "action", "q"])
            for idx in np.ndindex(res.q.shape):
                w.writerow(list(idx) + [_f(res.q[idx])])
    write_policy_csv(out / "policy.csv", grid, res.policy)
    fh, w = _writer(out / "convergence.csv")
    with fh:
        w.writerow(["iteration", "residual"])
        for i, r in enumerate(res.residuals, 1):
            w.writerow([i, f"{r:.8e}"])
    fh, w = _writer(out / "values.csv")
    with fh:
        w.writerow(["cell"] + [f"w{k}" for k in range(mdp.n_domains)] + ["scalarized_soft_value"])
        for c, v in enumerate(res.scalarized_soft_values(mdp)):
            w.writerow([c] + [_f(x) for x in grid.cells[c]] + [_f(v)])
    print(f"{args.algo}: converged={res.converged} iterations={res.iterations} -> {out}")
    return 0


def cmd_train(args) -> int:
    raw = _read_config(args.config)
    env = raw.pop("env", args.env)
    mdp = pmomdp.load_mdp(args.mdp) if args.mdp else get_env(env).build()
    raw["variant"] = args.algo or raw.get("variant", "cmdsac")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.steps is not None:
        raw["total_steps"] = args.steps
    if args.warmup is not None:
        raw["warmup"] = args.warmup
    cfg = TrainConfig(**raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_training(mdp, cfg)
    res.write_metrics(out / "metrics.csv")
    write_policy_csv(out / "policy.csv", res.grid, res.policy)
    fh, w = _writer(out / "values.csv")
    with fh:
        w.writerow(["cell"] + [f"w{k}" for k in range(mdp.n_domains)] + ["scalarized_soft_value"])
        for c, v in enumerate(res.scalarized_soft_values(mdp)):
            w.writerow([c] + [_f(x) for x in res.grid.cells[c]] + [_f(v)])
    print(f"{cfg.variant}: {cfg.total_steps} steps, {len(res.metrics)} episodes -> {out}")
    return 0


def cmd_eval_ccs(args) -> int:
    raw = _read_config(args.config)
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    cfg = harness.ExperimentConfig(**raw)
    out = harness.run_experiment(cfg, args.out)
    print(f"results -> {out}")
    return 0


def cmd_eval_osi(args) -> int:
    raw = _read_config(args.config)
    env = raw.get("env", args.env)
    mdp = get_env(env).build()
    grid = pmomdp.make_grid(mdp.n_domains, raw.get("grid_resolution"))
    algo = raw.get("algo", args.algo)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", dp_solvers.ConvergenceWarning)
        policy = dp_solvers.solve(algo, mdp, grid, raw.get("alpha", dp_solvers.DEFAULT_ALPHA)).policy
    episodes = int(raw.get("episodes", args.episodes))
    steps = int(raw.get("steps", 50))
    osi, _ = harness.train_ensemble(mdp, int(raw.get("osi_transitions", 5000)),
                                    harness.rng_for(args.seed, 99), epochs=int(raw.get("osi_epochs", 10)),
                                    seed=args.seed)
    by_mode = {m: harness.evaluate_with_osi(policy, grid, mdp, m, episodes, harness.rng_for(args.seed, i),
                                            steps, osi)
               for i, m in enumerate(harness.OSI_MODES)}
    harness.write_osi_csv(by_mode, Path(args.out))
    for row in harness.osi_tendency(by_mode):
        print("{}: increase={} decrease={}".format(*row))
    return 0


def cmd_sigma_points(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", unscented.SigmaPointWarning)
        train, held = unscented.solve_train_eval_pair(args.dim, args.order, args.tol, seed=args.seed)
    for c in caught:
        log.warning("%s", c.message)
    unscented.write_sigma_csv(train, out / "train.csv")
    unscented.write_sigma_csv(held, out / "eval.csv")
    print(f"d={args.dim} order={train.moment_order} residual train={train.residual:.3e} "
          f"eval={held.residual:.3e} -> {out}")
    return 0


def cmd_oracle(args) -> int:
    mdp = _load_mdp(args)
    grid = pmomdp.make_grid(mdp.n_domains, args.grid)
    en = utility.enumerate_policies_oracle(mdp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = ["".join(map(str, a)) for a in en.actions]
    fh, w = _writer(out / "policies.csv")
    with fh:
        w.writerow(["policy_id"] + [f"v{k}" for k in range(mdp.n_domains)])
        for pid, v in zip(ids, en.initial):
            w.writerow([pid] + [_f(x) for x in v])
    pcs = utility.compute_pcs(en.initial)
    ccs = utility.compute_ccs(en.initial, grid)
    utility.write_coverage_csv(pcs, out / "pcs.csv", ids)
    utility.write_coverage_csv(ccs, out / "ccs.csv", ids)
    print(f"{len(en)} policies, |PCS|={len(pcs)}, |CCS|={len(ccs)} -> {out}")
    return 0


def cmd_env_export(args) -> int:
    mdp = get_env(args.name).build()
    pmomdp.save_mdp(mdp, args.out)
    print(f"{args.name} -> {args.out}")
    return 0


def _common(seed_default: int | None = 0) -> argparse.ArgumentParser:
    # a fresh parent per subcommand: argparse shares parent actions, so defaults would leak
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=seed_default)
    common.add_argument("--out", default="out")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdrl", description="Multi-domain soft RL toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("solve", parents=[_common()], help="exact tabular solve")
    s.add_argument("--algo", choices=dp_solvers.HIERARCHY_SOLVERS, default="cmdrl")
    s.add_argument("--mdp", help="serialized MDP file")
    s.add_argument("--env", default="two-domain-chain", choices=sorted(ENVS))
    s.add_argument("--grid", type=int, default=None, help="grid resolution")
    s.add_argument("--alpha", type=float, default=dp_solvers.DEFAULT_ALPHA)
    s.add_argument("--tol", type=float, default=dp_solvers.DEFAULT_TOL)
    s.add_argument("--max-iter", type=int, default=dp_solvers.DEFAULT_MAX_ITER)
    s.set_defaults(fn=cmd_solve)

    s = sub.add_parser("train", parents=[_common(None)], help="sample-based training")
    s.add_argument("--algo", choices=VARIANTS, default=None)
    s.add_argument("--mdp")
    s.add_argument("--env", default="two-domain-chain", choices=sorted(ENVS))
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--warmup", type=int, default=None, help="random-action steps before updates")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval-ccs", parents=[_common(None)], help="CCS-score experiment")
    s.set_defaults(fn=cmd_eval_ccs)

    s = sub.add_parser("eval-osi", parents=[_common()], help="deployment with identification")
    s.add_argument("--env", default="two-domain-chain", choices=sorted(ENVS))
    s.add_argument("--algo", choices=dp_solvers.HIERARCHY_SOLVERS, default="cmdrl")
    s.add_argument("--episodes", type=int, default=100)
    s.set_defaults(fn=cmd_eval_osi)

    s = sub.add_parser("sigma-points", parents=[_common()], help="solve train/eval sigma points")
    s.add_argument("--dim", type=int, default=1)
    s.add_argument("--order", type=int, default=None)
    s.add_argument("--tol", type=float, default=1e-6)
    s.set_defaults(fn=cmd_sigma_points)

    s = sub.add_parser("oracle", parents=[_common()], help="enumerate deterministic policies")
    s.add_argument("--mdp")
    s.add_argument("--env", default="two-domain-chain", choices=sorted(ENVS))
    s.add_argument("--grid", type=int, default=None)
    s.set_defaults(fn=cmd_oracle)

    e = sub.add_parser("env", help="environment utilities")
    esub = e.add_subparsers(dest="env_cmd", required=True)
    s = esub.add_parser("export", parents=[_common()], help="write an environment to a file")
    s.add_argument("--name", required=True, choices=sorted(ENVS))
    s.set_defaults(fn=cmd_env_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
