#!/usr/bin/env python3
"""Refinement study: rerun a scenario at doubled resolutions.

Each level doubles the node count and deepens the grid and box hierarchy by
one level, then records the square-function ratio, the chain supremum and
K(eps) into convergence.csv for plotting:

    python3 scripts/convergence_study.py scenarios/line_poisson.json -n 3
"""

import argparse
import sys

from adrsq.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", help="scenario JSON file")
    ap.add_argument("-n", "--levels", type=int, default=3,
                    help="refinement levels (>= 2)")
    ap.add_argument("-o", "--out", default="reports", help="report directory")
    args = ap.parse_args()
    return cli_main(["convergence", "--scenario", args.scenario,
                     "--out", args.out, "--refine", str(args.levels)])


if __name__ == "__main__":
    sys.exit(main())
