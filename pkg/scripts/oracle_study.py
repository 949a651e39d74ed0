"""Grid Q-function for the scalar problem: scheme error, dependence on M, learner comparison.

    python3 scripts/oracle_study.py --points 201 --train-seed 0
"""

import argparse
import json
import math
import os

import numpy as np

from hjbq.cli import compare_report
from hjbq.env import make_lqr1d
from hjbq.learner import TrainConfig, train
from hjbq.odeint import write_csv
from hjbq.oracle import GridSpec, interpolate, monotonicity_in_M, save_solution, scheme_error_estimate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=201)
    ap.add_argument("--extent", type=float, default=2.0)
    ap.add_argument("--M", type=float, nargs="+", default=[0.5, 1.0, 2.0, 4.0])
    ap.add_argument("--train-seed", type=int, default=None, help="also train and compare")
    ap.add_argument("--out", default="results/oracle")
    args = ap.parse_args()

    env = make_lqr1d()
    grid = GridSpec.box(2, args.extent, args.points)
    os.makedirs(args.out, exist_ok=True)

    gap, sol, _ = scheme_error_estimate(env, grid)
    save_solution(os.path.join(args.out, "solution.json"), sol, fmt="raw")
    print(f"scheme gap {gap:.4f}, Q(1,1) = {interpolate(sol, np.ones((1, 2)))[0]:.4f}")

    P = (-env.gamma + math.sqrt(env.gamma**2 + 4.0)) / 2.0
    xs = np.linspace(-1.0, 1.0, 21)
    probes = np.column_stack([xs, -P * xs])
    sols = monotonicity_in_M(env, grid, args.M)
    rows = np.column_stack([xs, P * xs**2] + [interpolate(s, probes) for s in sols])
    write_csv(os.path.join(args.out, "riccati_line.csv"), ["x", "P_x2"] + [f"M_{M:g}" for M in args.M], rows)

    if args.train_seed is not None:
        res = train(env, TrainConfig(seed=args.train_seed, eval_every=1000))
        rows, summary = compare_report(res.params, sol, env, inner=0.5, per_axis=21)
        write_csv(os.path.join(args.out, "compare.csv"),
                  ["x_0", "u_0", "q_learned", "q_oracle", "abs_err", "policy_match"], rows)
        print(json.dumps(summary, sort_keys=True))


if __name__ == "__main__":
    main()
