"""Command-line entry point: ``hjbq {train,eval,solve-hjb,compare}``.

Exit codes: 0 success, 2 config error, 3 artifact/shape error,
4 numerical divergence or non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from .env import make_rng
from .errors import (
    ArtifactError,
    ContractError,
    DivergenceError,
    NonConvergenceError,
    TrainingDivergenceError,
)
from .learner import network_policy, policy_direction, train
from .odeint import IntegratorConfig, evaluate_policy, trajectory_record, write_csv
from .oracle import (
    CapacityError,
    GridSpec,
    greedy_policy,
    interpolate,
    load_solution,
    save_solution,
    solve_finite,
    solve_infinite,
)
from .qnet import forward, input_gradient, load_checkpoint, save_checkpoint

log = logging.getLogger("hjbq")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_DIVERGED = 0, 2, 3, 4


def _overrides(args):
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise cfgmod.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    return out


def _resolved(args):
    raw = cfgmod.load_file(args.config) if args.config else {}
    return cfgmod.resolve(raw, _overrides(args))


class Manifest:
    """Run record: resolved config, fingerprint, artifacts, timings."""

    def __init__(self, out_dir, command, cfg):
        self.out_dir = out_dir
        self.started = time.time()
        self.doc = {
            "command": command,
            "config": cfg,
            "seed": cfg.get("seed"),
            "fingerprint": cfgmod.fingerprint(cfg),
            "artifacts": [],
            "status": "running",
        }

    def path(self, name):
        p = os.path.join(self.out_dir, name)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        self.doc["artifacts"].append(name)
        return p

    def write(self, status, **extra):
        self.doc["status"] = status
        self.doc.update(extra)
        self.doc["wall_clock"] = {
            "started": self.started,
            "finished": time.time(),
            "elapsed_s": time.time() - self.started,
        }
        with open(os.path.join(self.out_dir, "manifest.json"), "w") as fh:
            json.dump(self.doc, fh, indent=1, sort_keys=True)


def cmd_train(args):
    cfg = _resolved(args)
    env = cfgmod.build_env(cfg)
    tcfg = cfgmod.build_train_config(cfg, env)
    os.makedirs(args.out_dir, exist_ok=True)
    man = Manifest(args.out_dir, "train", cfg)
    fp = man.doc["fingerprint"]

    def checkpoint(it, params, target, adam):
        save_checkpoint(man.path(f"checkpoints/iter_{it:06d}.json"), params, target, adam, fp,
                        {"iteration": it, "n": env.n, "m": env.m})

    try:
        res = train(env, tcfg, checkpoint_fn=checkpoint)
    except TrainingDivergenceError as exc:
        if exc.state is not None:
            save_checkpoint(man.path("checkpoint.json"), *exc.state, fp,
                            {"iteration": exc.iteration, "diverged": True, "n": env.n, "m": env.m})
        man.write("diverged", error=str(exc), iteration=exc.iteration)
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    res.curve.to_csv(man.path("curve.csv"))
    save_checkpoint(man.path("checkpoint.json"), res.params, res.target, res.adam, fp,
                    {"iteration": tcfg.N, "n": env.n, "m": env.m})
    costs = res.curve.column("eval_cost")
    man.write("ok", eval_start=res.eval_start.tolist())
    print(f"initial eval_cost {costs[0]:.6g} final eval_cost {costs[-1]:.6g}")
    return EXIT_OK


def _parse_point(text, dim, what):
    vals = cfgmod._floats(text)
    if len(vals) != dim:
        raise cfgmod.ConfigError(f"{what} needs {dim} comma-separated values, got {len(vals)}")
    return np.array(vals)


def cmd_eval(args):
    cfg = _resolved(args)
    env = cfgmod.build_env(cfg)
    ck = load_checkpoint(args.checkpoint, env.dim)
    if args.z0:
        z0 = _parse_point(args.z0, env.dim, "--z0")
    else:
        z0 = np.asarray(cfgmod.build_train_config(cfg, env).eval_start, dtype=float)
    T = args.T if args.T is not None else cfg["eval_T"]
    icfg = IntegratorConfig(cfg["h"], cfg["substeps"])
    os.makedirs(args.out_dir, exist_ok=True)
    man = Manifest(args.out_dir, "eval", cfg)
    policy = network_policy(ck.params, env, cfg["grad_zero_tol"], make_rng(cfg["seed"], 3, 0))
    try:
        cost = evaluate_policy(env, z0, policy, T, icfg)
        policy = network_policy(ck.params, env, cfg["grad_zero_tol"], make_rng(cfg["seed"], 3, 0))
        traj = trajectory_record(env, z0, policy, T, icfg, cfg["sample_dt"])
    except DivergenceError as exc:
        man.write("diverged", error=str(exc))
        print(f"rollout diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    traj.to_csv(man.path("trajectory.csv"))
    man.write("ok", cost=cost, z0=z0.tolist(), T_eval=T)
    print(format(cost, ".17g"))
    return EXIT_OK


def cmd_solve_hjb(args):
    cfg = _resolved(args)
    env = cfgmod.build_env(cfg)
    if env.dim > 4:
        raise CapacityError(f"grid oracle supports n+m <= 4, got {env.dim}")
    time_axis = (cfg["T"], cfg["time_steps"]) if cfg["mode"] == "finite" else None
    grid = GridSpec.box(env.dim, cfg["grid_extent"], cfg["grid_points"], time_axis)
    os.makedirs(args.out_dir, exist_ok=True)
    man = Manifest(args.out_dir, "solve-hjb", cfg)
    status, code = "ok", EXIT_OK
    if cfg["mode"] == "finite":
        sol = solve_finite(env, grid)
    else:
        try:
            sol = solve_infinite(env, grid, cfg["delta"], None, cfg["hjb_tol"], cfg["max_iter"])
        except NonConvergenceError as exc:
            sol, status, code = exc.solution, "not_converged", EXIT_DIVERGED
            print(f"solver did not converge: {exc}", file=sys.stderr)
    save_solution(man.path("solution.json"), sol, cfg["value_format"])
    man.doc["artifacts"].append("solution" + (".csv" if cfg["value_format"] == "csv" else ".f64"))
    write_csv(man.path("convergence.csv"), ["iteration", "sup_update"], sol.history)
    man.write(status, converged=sol.converged)
    print(f"converged={sol.converged} iterations={sol.meta.get('iterations', sol.meta.get('steps'))}")
    return code


def probe_points(grid, inner, per_axis):
    """Regular lattice over the central ``inner`` fraction of the grid box."""
    mid = 0.5 * (grid.lo + grid.hi)
    half = 0.5 * inner * (grid.hi - grid.lo)
    axes = [np.linspace(c - r, c + r, per_axis) for c, r in zip(mid, half)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def compare_report(params, sol, env, inner, per_axis, grad_zero_tol=1e-12):
    """Per-probe learned vs oracle values and rate-sign agreement.

    Returns ``(rows, summary)``; rows follow the compare CSV columns.
    """
    if sol.grid.time is not None:
        raise ArtifactError("compare needs an infinite-horizon solution")
    if sol.grid.dim != env.dim or params.input_dim != env.dim:
        raise ArtifactError(
            f"dimension mismatch: grid {sol.grid.dim}, network {params.input_dim}, env {env.dim}"
        )
    Z = probe_points(sol.grid, inner, per_axis)
    q_l = forward(params, Z)
    q_o = interpolate(sol, Z)
    a_l = policy_direction(input_gradient(params, Z)[:, env.n :], env.M, grad_zero_tol, make_rng(0, 6))
    a_o = greedy_policy(sol, env)(Z)
    match = np.all(np.sign(a_l) == np.sign(a_o), axis=1)
    err = np.abs(q_l - q_o)
    rows = np.column_stack([Z, q_l, q_o, err, match.astype(float)])
    summary = {
        "max_abs_err": float(err.max()),
        "mean_abs_err": float(err.mean()),
        "policy_agreement": float(match.mean()),
        "probes": int(Z.shape[0]),
        "inner": inner,
    }
    return rows, summary


def cmd_compare(args):
    cfg = _resolved(args)
    env = cfgmod.build_env(cfg)
    sol = load_solution(args.solution)
    ck = load_checkpoint(args.checkpoint, env.dim)
    inner = args.inner if args.inner is not None else cfg["inner"]
    rows, summary = compare_report(ck.params, sol, env, inner, cfg["probe_per_axis"], cfg["grad_zero_tol"])
    os.makedirs(args.out_dir, exist_ok=True)
    man = Manifest(args.out_dir, "compare", cfg)
    header = (
        [f"x_{i}" for i in range(env.n)]
        + [f"u_{i}" for i in range(env.m)]
        + ["q_learned", "q_oracle", "abs_err", "policy_match"]
    )
    write_csv(man.path("compare.csv"), header, rows)
    man.write("ok", **summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hjbq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override (repeatable)")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=S")
        p.add_argument("--out-dir", default=".", help="artifact directory")

    p = sub.add_parser("train", help="run continuous-time Q-learning")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint's greedy policy")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--z0", help="comma-separated start state x..., u...")
    p.add_argument("--T", type=float, help="evaluation horizon (default eval_T)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve-hjb", help="solve the Q-function HJB equation on a grid")
    common(p)
    p.set_defaults(func=cmd_solve_hjb)

    p = sub.add_parser("compare", help="compare a checkpoint with a grid solution")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--solution", required=True, help="solution.json from solve-hjb")
    p.add_argument("--inner", type=float, help="central fraction of the grid box to probe")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, ContractError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (DivergenceError, NonConvergenceError, TrainingDivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
