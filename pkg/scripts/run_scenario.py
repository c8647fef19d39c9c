#!/usr/bin/env python3
"""Run one scenario end to end and drop reports next to it.

Equivalent to `adrsq all --scenario <file>`, kept as a script so a checkout
without the console entry point still runs:

    python3 scripts/run_scenario.py scenarios/line_poisson.json -o reports/line
"""

import argparse
import sys

from adrsq.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", help="scenario JSON file")
    ap.add_argument("-o", "--out", default="reports", help="report directory")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    argv = ["all", "--scenario", args.scenario, "--out", args.out]
    if args.threads is not None:
        argv += ["--threads", str(args.threads)]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
