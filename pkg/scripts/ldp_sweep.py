"""Trend table of -eps log P(X_T >= z) against the minimal action.

    python3 scripts/ldp_sweep.py --model ou --z 1.0 --n 100000
"""

import argparse
import math

import numpy as np
from scipy.stats import norm

from ldpkit import EventSet, OrnsteinUhlenbeck, Schilder, TimeGrid, epsilon_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", choices=["schilder", "ou"], default="schilder")
    ap.add_argument("--z", type=float, default=2.0)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.5, 0.2, 0.1, 0.05, 0.02])
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--method", choices=["naive", "importance"], default="importance")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    model = Schilder() if args.model == "schilder" else OrnsteinUhlenbeck(1.0)
    grid = TimeGrid(1.0, args.steps)
    rep = epsilon_sweep(model, grid, np.zeros(1), EventSet.halfspace(args.z), args.eps, args.n, args.seed,
                        args.method, args.threads)
    print(f"# {args.model}, X_T >= {args.z}, {args.method}, n = {args.n}, I* = {rep.reference['value']:.5f}")
    print(f"{'eps':>8} {'p_hat':>12} {'-eps log p':>12} {'+-':>9} {'continuum':>10}")
    for r in rep.rows:
        # X_T is Gaussian for both models; variance eps T or eps (1 - e^{-2}) / 2
        var = r.eps if args.model == "schilder" else r.eps * (1 - math.exp(-2.0)) / 2
        exact = -r.eps * norm.logsf(args.z / math.sqrt(var))
        val = "unresolved" if r.minus_eps_log is None else f"{r.minus_eps_log:.5f}"
        err = r.minus_eps_log_stderr or float("nan")
        print(f"{r.eps:8.3g} {r.estimate:12.4e} {val:>12} {err:9.2g} {exact:10.5f}")


if __name__ == "__main__":
    main()
