"""Certified floor xi(N) for the square-root model and the worst skeleton minimum found.

    python3 scripts/positivity_floor.py --caps 0.01 0.1 1 4
"""

import argparse

from ldpkit import CIR, TimeGrid, positivity_floor
from ldpkit.skeleton import check_floor


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--caps", type=float, nargs="+", default=[0.01, 0.1, 1.0, 4.0])
    ap.add_argument("--x-bar", type=float, default=0.5)
    ap.add_argument("--controls", type=int, default=1000)
    ap.add_argument("--steps", type=int, default=1000)
    args = ap.parse_args()

    cir = CIR(1.0, 1.0, 1.0)
    grid = TimeGrid(1.0, args.steps)
    print(f"{'N':>8} {'xi':>12} {'min phi':>10} {'violations':>10}")
    for N in args.caps:
        cert = positivity_floor(cir, N, args.x_bar, 1.0)
        rep = check_floor(cir, grid, 1.0, cert, args.controls, seed=0)
        print(f"{N:8.3g} {cert.xi:12.4e} {rep.min_value:10.4f} {rep.violations:10d}")


if __name__ == "__main__":
    main()
