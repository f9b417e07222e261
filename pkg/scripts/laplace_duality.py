"""Laplace functional -eps log E exp(-F/eps) against inf {I + F} on the Schilder model.

    python3 scripts/laplace_duality.py --eps 0.5 0.1 0.05 0.01
"""

import argparse

import numpy as np

from ldpkit import PathFunctional, Schilder, TimeGrid, laplace_infimum, mc_laplace


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--eps", type=float, nargs="+", default=[0.5, 0.2, 0.1, 0.05, 0.02])
    ap.add_argument("--knots", type=float, nargs="+", default=[0.0, 2.0])
    ap.add_argument("--values", type=float, nargs="+", default=[1.0, 0.0])
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    grid = TimeGrid(1.0, 100)
    F = PathFunctional.table_cost(args.knots, args.values)
    inf = laplace_infimum(Schilder(), grid, np.zeros(1), F)
    print(f"# inf (I + F) = {inf:.6f}")
    for eps in args.eps:
        row = mc_laplace(Schilder(), grid, np.zeros(1), eps, F, args.n, args.seed)
        print(f"{eps:8.3g} {row.estimate:10.5f} +- {row.stderr:.2g}   gap {row.estimate - inf:+.4f}")


if __name__ == "__main__":
    main()
