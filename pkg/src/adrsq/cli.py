"""Command-line entry point.

Exit codes: 0 all selected checks passed, 2 at least one verification
failed (the report says which), 1 configuration or runtime error (the
message names the offending field).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .geometry import GeometryError
from .dyadic import GridError, save_grid
from .whitney import WhitneyError
from .operators import KernelError
from .tb import TbError
from .report import (
    ReportError,
    stage_csv_rows,
    validate_report,
    write_csv,
    write_json,
)
from .scenario import (
    ScenarioBundle,
    ScenarioError,
    emit_convergence,
    load_scenario,
    run_tb_pipeline,
)

# stages each command selects; None means every stage the scenario enables
COMMAND_STAGES = {
    "verify-geometry": ("geometry",),
    "build-grid": ("geometry", "grid"),
    "verify-grid": ("geometry", "grid"),
    "run-t1": ("geometry", "grid", "whitney", "kernel", "t1"),
    "run-tb": None,
    "tail": ("geometry", "kernel", "tail"),
    "all": None,
    "convergence": None,
}

_EXPECTED_ERRORS = (ScenarioError, GeometryError, GridError, WhitneyError,
                    KernelError, TbError, ReportError)

log = logging.getLogger("adrsq")


def _configure_logging():
    level_name = os.environ.get("ADRSQ_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adrsq",
        description="Geometric scaffolding and square-function checks "
                    "on regular boundary sets.")
    parser.add_argument("command", choices=sorted(COMMAND_STAGES))
    parser.add_argument("--scenario", required=True,
                        help="path to a scenario JSON file")
    parser.add_argument("--out", default="reports",
                        help="directory for report artifacts")
    parser.add_argument("--refine", type=int, default=1,
                        help="per-axis quadrature refinement on boxes; for "
                             "`convergence`, the number of dyadic levels")
    parser.add_argument("--threads", type=int, default=0,
                        help="cap BLAS/OpenMP thread pools (0 keeps default)")
    return parser


def _write_stage_tables(payload: dict, out_dir: Path) -> None:
    for st in payload["stages"]:
        if st["name"] == "k_epsilon" and "curve" in st["values"]:
            rows = [(row["eps"], row["K"]) for row in st["values"]["curve"]]
            write_csv(out_dir / "k_epsilon.csv", ("eps", "K"), rows)
        if st["name"] == "tail" and "annuli" in st["values"]:
            rows = sorted((int(k), v)
                          for k, v in st["values"]["annuli"].items())
            write_csv(out_dir / "tail.csv", ("annulus_k", "mass"), rows)
        if st["name"] == "level_sets" and "fractions" in st["values"]:
            rows = []
            for cube, fractions in sorted(st["values"]["fractions"].items()):
                for N, fr in zip(st["values"]["thresholds"], fractions):
                    rows.append((cube.replace(",", ";"), N, fr))
            write_csv(out_dir / "level_sets.csv",
                      ("cube", "threshold", "fraction"), rows)


def _run_convergence(scenario, levels: int, out_dir: Path) -> int:
    payload = emit_convergence(scenario, levels)
    write_json(out_dir / "convergence.json", payload)
    header = sorted({key for row in payload["rows"] for key in row})
    rows = [tuple(row.get(key, "") for key in header)
            for row in payload["rows"]]
    write_csv(out_dir / "convergence.csv", header, rows)
    for row in payload["rows"]:
        print(f"level {row['level']}: resolution={row['resolution']} "
              f"sup={row['constant_sup']:.6g} K(eps)={row['k_epsilon']:.6g}")
    print(f"wrote {out_dir / 'convergence.json'}")
    return 0


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    if args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
    out_dir = Path(args.out)
    try:
        scenario = load_scenario(args.scenario)
        if args.command == "convergence":
            if args.refine < 2:
                raise ScenarioError(
                    "refine: >= 2 levels required for a convergence study")
            return _run_convergence(scenario, args.refine, out_dir)
        if args.refine > 1:
            scenario.functionals["refine"] = args.refine
        bundle = ScenarioBundle(scenario)
        log.info("running %s on scenario %s", args.command, scenario.name)
        result = run_tb_pipeline(scenario,
                                 only_stages=COMMAND_STAGES[args.command],
                                 bundle=bundle)
        payload = result.as_dict()
        validate_report(payload)
        write_json(out_dir / "report.json", payload)
        write_csv(out_dir / "summary.csv", ("stage", "status"),
                  stage_csv_rows(payload))
        _write_stage_tables(payload, out_dir)
        if args.command in ("build-grid", "all"):
            save_grid(bundle.grid(), out_dir / "grid.json")
        for st in result.stages:
            print(f"[{st['status']}] {st['name']}")
        verdict = "PASS" if result.all_passed else "FAIL"
        print(f"scenario '{scenario.name}': {verdict} "
              f"(report at {out_dir / 'report.json'})")
        return 0 if result.all_passed else 2
    except _EXPECTED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
