"""Train on the scalar problem from (x, u) = (1, 1) and dump curves and trajectories.

    python3 scripts/lqr1d_learning.py --seeds 0 1 2 3 4 --out results/lqr1d
"""

import argparse
import os

import numpy as np

from hjbq.env import make_lqr1d, make_rng
from hjbq.learner import TrainConfig, network_policy, train
from hjbq.odeint import trajectory_record


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--N", type=int, default=1000)
    ap.add_argument("--eval-every", type=int, default=50)
    ap.add_argument("--out", default="results/lqr1d")
    args = ap.parse_args()

    env = make_lqr1d()
    os.makedirs(args.out, exist_ok=True)
    for seed in args.seeds:
        cfg = TrainConfig(N=args.N, seed=seed, eval_every=args.eval_every)
        res = train(env, cfg)
        res.curve.to_csv(os.path.join(args.out, f"curve_seed{seed}.csv"))
        pol = network_policy(res.params, env, cfg.grad_zero_tol, make_rng(seed, 9))
        tr = trajectory_record(env, np.ones(2), pol, 10.0, cfg.integrator, 0.05)
        tr.to_csv(os.path.join(args.out, f"trajectory_seed{seed}.csv"))
        cost = res.curve.column("eval_cost")
        print(f"seed {seed}: cost {cost[0]:.4g} -> {cost[-1]:.4g}, x(10)={tr.x[-1, 0]:+.3f}, u(10)={tr.u[-1, 0]:+.3f}")


if __name__ == "__main__":
    main()
