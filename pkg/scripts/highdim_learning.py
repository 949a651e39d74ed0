"""Learning curves on random linear systems with n = m = 10 and 20.

    python3 scripts/highdim_learning.py --dims 10 20 --seeds 0 1 2 3 4
"""

import argparse
import os

from hjbq.env import make_random_lqr
from hjbq.learner import TrainConfig, default_eval_start, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, nargs="+", default=[10, 20])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--N", type=int, default=1000)
    ap.add_argument("--eval-every", type=int, default=50)
    ap.add_argument("--out", default="results/highdim")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    for dim in args.dims:
        for seed in args.seeds:
            env = make_random_lqr(dim, dim, seed)
            cfg = TrainConfig(N=args.N, seed=seed, eval_every=args.eval_every,
                              eval_start=tuple(default_eval_start(env, seed)))
            curve = train(env, cfg).curve
            curve.to_csv(os.path.join(args.out, f"curve_n{dim}_seed{seed}.csv"))
            cost = curve.column("eval_cost")
            print(f"n=m={dim} seed {seed}: {cost[0]:.4g} -> {cost[-1]:.4g}")


if __name__ == "__main__":
    main()
