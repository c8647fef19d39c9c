"""Scenario configuration and the staged verification pipeline.

A scenario JSON names a boundary set, a cube hierarchy, a Whitney window,
a kernel, and optionally a test system plus functional/threshold settings.
The pipeline runs the stages in a fixed order, each producing a status and
a plain-data value dict; a failed hypothesis stage does not stop the run
but marks the stages that depend on it.  All randomness is seeded from the
scenario, so reruns produce identical reports.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import KINDS, make_boundary_set, verify_adr
from .dyadic import DyadicGrid, GridConstants, build_grid, verify_grid
from .whitney import ConeIndex, beta_star, build_whitney, verify_whitney
from .operators import (
    KERNEL_NAMES,
    build_approx_identity,
    global_square_norm,
    make_kernel,
    reproduce_residual,
    theta_on_boxes,
    verify_kernel,
)
from .tb import (
    SYSTEM_GENERATORS,
    K_epsilon,
    bounded_tail,
    carleson_functional,
    certificate_check,
    generate_test_system,
    level_set_fraction,
    sawtooth_inclusion_check,
    stopping_time,
    system_theta_samples,
    t1_check,
    verify_packing,
    verify_tb_hypotheses,
    _cube_T_levels,
)

PIPELINE_STAGES = ("geometry", "grid", "whitney", "kernel", "hypotheses",
                   "stopping", "k_epsilon", "level_sets", "t1", "tail")

TEST_FUNCTION_TYPES = ("ones", "coordinate", "band_limited", "harmonic",
                       "random")


class ScenarioError(ValueError):
    pass


def _expect(cond: bool, fieldname: str, msg: str):
    if not cond:
        raise ScenarioError(f"{fieldname}: {msg}")


@dataclass
class Scenario:
    name: str
    seed: int
    set_cfg: dict
    grid_cfg: dict
    whitney_cfg: dict
    kernel_cfg: dict
    system_cfg: dict | None
    test_functions: dict
    functionals: dict
    thresholds: dict
    tail_cfg: dict
    stages: list
    raw: dict = field(repr=False, default_factory=dict)


def scenario_from_dict(cfg: dict) -> Scenario:
    _expect(isinstance(cfg, dict), "scenario", "must be a JSON object")
    _expect("name" in cfg and isinstance(cfg["name"], str), "name",
            "missing or not a string")
    seed = cfg.get("seed", 0)
    _expect(isinstance(seed, int), "seed", "must be an integer")

    sc = cfg.get("set")
    _expect(isinstance(sc, dict), "set", "missing section")
    _expect(sc.get("kind") in KINDS, "set.kind",
            f"must be one of {sorted(KINDS)}, got {sc.get('kind')!r}")
    res = sc.get("resolution")
    _expect(isinstance(res, int) and res >= 2, "set.resolution",
            f"must be an integer >= 2, got {res!r}")
    params = sc.get("params", {})
    _expect(isinstance(params, dict), "set.params", "must be an object")
    # geometry knobs (length, radius, depth, ...) live under set.params;
    # a stray key here would be silently dropped, so refuse it
    stray = set(sc) - {"kind", "resolution", "params", "adr_samples"}
    _expect(not stray, "set", f"unknown keys {sorted(stray)}; "
            "geometry parameters belong under set.params")

    gc = cfg.get("grid")
    _expect(isinstance(gc, dict), "grid", "missing section")
    for key in ("k_min", "k_max"):
        _expect(isinstance(gc.get(key), int), f"grid.{key}",
                "must be an integer")
    _expect(gc["k_min"] <= gc["k_max"], "grid.k_min",
            "must not exceed grid.k_max")

    wc = cfg.get("whitney")
    _expect(isinstance(wc, dict), "whitney", "missing section")
    for key in ("k_min", "k_max"):
        _expect(isinstance(wc.get(key), int), f"whitney.{key}",
                "must be an integer")
    _expect(wc["k_min"] <= wc["k_max"], "whitney.k_min",
            "must not exceed whitney.k_max")
    win = wc.get("window")
    _expect(isinstance(win, list) and all(
        isinstance(r, list) and len(r) == 2 for r in win),
        "whitney.window", "must be a list of [lo, hi] pairs")

    kc = cfg.get("kernel")
    _expect(isinstance(kc, dict), "kernel", "missing section")
    _expect(kc.get("name") in KERNEL_NAMES, "kernel.name",
            f"must be one of {KERNEL_NAMES}, got {kc.get('name')!r}")
    for key in ("alpha", "c_psi", "c_holder", "eps_holder"):
        if key in kc:
            _expect(isinstance(kc[key], (int, float)) and kc[key] > 0,
                    f"kernel.{key}", f"must be positive, got {kc[key]!r}")

    yc = cfg.get("system")
    if yc is not None:
        _expect(isinstance(yc, dict), "system", "must be an object")
        _expect(yc.get("generator") in SYSTEM_GENERATORS, "system.generator",
                f"must be one of {SYSTEM_GENERATORS}")
        _expect(isinstance(yc.get("C0"), (int, float)) and yc["C0"] > 1,
                "system.C0", f"must exceed 1, got {yc.get('C0')!r}")
        p = yc.get("p", 2.0)
        _expect(isinstance(p, (int, float)) and 1.0 < p <= 2.0, "system.p",
                f"must lie in (1, 2], got {p!r}")

    tf = cfg.get("test_functions", {})
    _expect(isinstance(tf, dict), "test_functions", "must be an object")
    for label, spec in tf.items():
        _expect(isinstance(spec, dict)
                and spec.get("type") in TEST_FUNCTION_TYPES,
                f"test_functions.{label}.type",
                f"must be one of {TEST_FUNCTION_TYPES}")

    fc = cfg.get("functionals", {})
    _expect(isinstance(fc, dict), "functionals", "must be an object")
    eps_list = fc.get("epsilons", [0.25, 0.125, 0.0625])
    _expect(all(isinstance(e, (int, float)) and e >= 0 for e in eps_list),
            "functionals.epsilons", "entries must be nonnegative numbers")
    n_list = fc.get("level_set_N", [0.0])
    _expect(all(isinstance(v, (int, float)) and v >= 0 for v in n_list),
            "functionals.level_set_N", "entries must be nonnegative numbers")

    th = cfg.get("thresholds", {})
    _expect(isinstance(th, dict), "thresholds", "must be an object")

    tc = cfg.get("tail", {})
    _expect(isinstance(tc, dict), "tail", "must be an object")

    stages = cfg.get("stages", list(PIPELINE_STAGES))
    _expect(isinstance(stages, list) and all(s in PIPELINE_STAGES
                                             for s in stages),
            "stages", f"entries must be among {PIPELINE_STAGES}")

    return Scenario(
        name=cfg["name"], seed=seed, set_cfg=sc, grid_cfg=gc, whitney_cfg=wc,
        kernel_cfg=kc, system_cfg=yc, test_functions=tf,
        functionals={"epsilons": list(eps_list), "level_set_N": list(n_list),
                     "eps_sawtooth": fc.get("eps_sawtooth", 0.01),
                     "refine": fc.get("refine", 1)},
        thresholds=th, tail_cfg=tc, stages=list(stages), raw=cfg)


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario: file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario: invalid JSON in {path}: {exc}") from exc
    return scenario_from_dict(cfg)


def make_test_function(bset, spec: dict, seed: int = 0) -> np.ndarray:
    kind = spec["type"]
    x = bset.points
    if kind == "ones":
        return np.ones(bset.n_nodes)
    if kind == "coordinate":
        return x[:, 0].copy()
    if kind == "random":
        rng = np.random.default_rng(spec.get("seed", seed))
        return rng.standard_normal(bset.n_nodes) * spec.get("amplitude", 1.0)
    if kind == "harmonic":
        m = spec.get("m", 1)
        theta = np.arctan2(x[:, 1], x[:, 0])
        return np.cos(m * theta)
    # band_limited: sine at the given frequency under a cosine-squared taper
    freq = spec.get("freq", 2.0)
    support = spec.get("support")
    ramp = spec.get("ramp", 0.25)
    t = x[:, 0]
    vals = np.sin(2.0 * math.pi * freq * t)
    if support is not None:
        lo, hi = support
        env = np.zeros_like(t)
        rise = (t >= lo) & (t < lo + ramp)
        flat = (t >= lo + ramp) & (t <= hi - ramp)
        fall = (t > hi - ramp) & (t <= hi)
        env[rise] = np.sin(0.5 * math.pi * (t[rise] - lo) / ramp) ** 2
        env[flat] = 1.0
        env[fall] = np.sin(0.5 * math.pi * (hi - t[fall]) / ramp) ** 2
        vals = vals * env
    return vals


class ScenarioBundle:
    """Lazily built objects shared by the pipeline stages."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self._cache = {}

    def bset(self):
        if "bset" not in self._cache:
            sc = self.scenario.set_cfg
            self._cache["bset"] = make_boundary_set(
                sc["kind"], sc["resolution"], **sc.get("params", {}))
        return self._cache["bset"]

    def grid(self) -> DyadicGrid:
        if "grid" not in self._cache:
            gc = self.scenario.grid_cfg
            constants = None
            if "constants" in gc:
                constants = GridConstants(**gc["constants"])
            self._cache["grid"] = build_grid(
                self.bset(), gc["k_min"], gc["k_max"], constants=constants)
        return self._cache["grid"]

    def whitney(self):
        if "whitney" not in self._cache:
            wc = self.scenario.whitney_cfg
            self._cache["whitney"] = build_whitney(
                self.bset(), np.asarray(wc["window"], dtype=float),
                wc["k_min"], wc["k_max"])
        return self._cache["whitney"]

    def kernel(self):
        if "kernel" not in self._cache:
            kc = dict(self.scenario.kernel_cfg)
            name = kc.pop("name")
            self._cache["kernel"] = make_kernel(name, self.bset(), **kc)
        return self._cache["kernel"]

    def cone_index(self) -> ConeIndex:
        if "cones" not in self._cache:
            beta = self.scenario.whitney_cfg.get("beta")
            if beta is None:
                beta = beta_star(self.whitney(), self.grid())
            self._cache["cones"] = ConeIndex(self.whitney(), self.grid(),
                                             beta=beta).build_all()
        return self._cache["cones"]

    def theta1(self):
        """Constant-density samples and per-cube chain weights."""
        if "theta1" not in self._cache:
            samples = theta_on_boxes(self.kernel(), self.whitney(), f=None,
                                     refine=self.scenario.functionals["refine"])
            T_levels = _cube_T_levels(
                self.grid(), self.cone_index(),
                samples.square_terms(self.bset().n + 1))
            self._cache["theta1"] = (samples, T_levels)
        return self._cache["theta1"]

    def functions(self) -> dict:
        if "functions" not in self._cache:
            self._cache["functions"] = {
                label: make_test_function(self.bset(), spec,
                                          seed=self.scenario.seed)
                for label, spec in self.scenario.test_functions.items()}
        return self._cache["functions"]

    def system(self):
        if "system" not in self._cache:
            yc = self.scenario.system_cfg
            if yc is None:
                self._cache["system"] = None
            else:
                cubes = yc.get("cubes", "top")
                if cubes == "top":
                    cube_ids = [c.cube_id for c in self.grid().top_cubes]
                else:
                    cube_ids = [tuple(c) for c in cubes]
                self._cache["system"] = generate_test_system(
                    self.grid(), yc["generator"], float(yc["C0"]),
                    float(yc.get("p", 2.0)), cube_ids,
                    seed=self.scenario.seed,
                    amplitude=yc.get("amplitude", 0.4))
        return self._cache["system"]

    def system_samples(self) -> dict:
        """Per-cube box samples for the system, deduplicated by content."""
        if "system_samples" not in self._cache:
            system = self.system()
            out = {}
            seen = {}
            for cid in system.cube_ids:
                key = (system.background[cid],
                       system.values[cid].tobytes())
                if key not in seen:
                    samples = system_theta_samples(
                        self.kernel(), self.whitney(), system, cid,
                        refine=self.scenario.functionals["refine"])
                    T_levels = _cube_T_levels(
                        self.grid(), self.cone_index(),
                        samples.square_terms(self.bset().n + 1))
                    seen[key] = (samples, T_levels)
                out[cid] = seen[key]
            self._cache["system_samples"] = out
        return self._cache["system_samples"]


def _monotone_nonincreasing(vals, tol=1e-12) -> bool:
    return all(b <= a + tol * max(1.0, abs(a)) for a, b in zip(vals, vals[1:]))


def _stage_geometry(bundle: ScenarioBundle) -> tuple:
    scn = bundle.scenario
    bset = bundle.bset()
    report = verify_adr(bset, sample_count=scn.set_cfg.get("adr_samples", 200),
                        seed=scn.seed)
    values = {
        "kind": bset.kind,
        "n_nodes": bset.n_nodes,
        "diameter": bset.diameter,
        "total_measure": bset.total_measure(),
        "node_spacing": bset.node_spacing(),
        "adr_declared": bset.adr_constant,
        "c_lower": report.c_lower,
        "c_upper": report.c_upper,
        "n_samples": report.n_samples,
    }
    return ("pass" if report.passed else "fail"), values


def _stage_grid(bundle: ScenarioBundle) -> tuple:
    grid = bundle.grid()
    report = verify_grid(grid)
    values = report.as_dict()
    values["n_cubes"] = {str(grid.k_min + li): len(cubes)
                         for li, cubes in enumerate(grid.levels)}
    return ("pass" if report.all_passed else "fail"), values


def _stage_whitney(bundle: ScenarioBundle) -> tuple:
    whit = bundle.whitney()
    report = verify_whitney(whit)
    values = report.as_dict()
    values["beta_star"] = bundle.cone_index().beta
    empty = sum(1 for c in bundle.grid().all_cubes()
                if len(bundle.cone_index().boxes(c.cube_id)) == 0)
    values["cubes_with_empty_collection"] = empty
    return ("pass" if report.all_passed else "fail"), values


def _stage_kernel(bundle: ScenarioBundle) -> tuple:
    scn = bundle.scenario
    report = verify_kernel(bundle.kernel(),
                           sample_count=scn.kernel_cfg.get("samples", 200),
                           seed=scn.seed)
    return ("pass" if report.all_passed else "fail"), report.as_dict()


def _stage_hypotheses(bundle: ScenarioBundle) -> tuple:
    system = bundle.system()
    if system is None:
        return "skipped", {"reason": "no system configured"}
    report = verify_tb_hypotheses(
        system, bundle.grid(), bundle.whitney(), bundle.kernel(),
        cone_index=bundle.cone_index(), samples_map=bundle.system_samples())
    values = {"generator": system.generator, "C0": system.C0, "p": system.p,
              **report.as_dict()}
    return ("pass" if report.passed else "fail"), values


def _stage_stopping(bundle: ScenarioBundle) -> tuple:
    system = bundle.system()
    if system is None:
        return "skipped", {"reason": "no system configured"}
    grid = bundle.grid()
    whit = bundle.whitney()
    kernel = bundle.kernel()
    cone_index = bundle.cone_index()
    eps_saw = bundle.scenario.functionals["eps_sawtooth"]
    samples_map = bundle.system_samples()
    per_cube = {}
    all_ok = True
    for cid in system.cube_ids:
        b = system.values[cid]
        family = stopping_time(grid, cid, b, system.C0)
        packing = verify_packing(grid, cid, b, system.C0)
        cert = certificate_check(grid, cid, b, system.C0, family.members)
        inclusion = sawtooth_inclusion_check(
            grid, whit, cone_index, cid, family.members, eps_saw)
        samples, T_levels = samples_map[cid]
        saw_value = carleson_functional(
            grid, whit, kernel, None, cid, variant="sawtooth", q=system.p,
            family=family.members, cone_index=cone_index, samples=samples,
            T_levels=T_levels)
        ok = (cert["passed"] and packing.passed
              and inclusion["violations"] == 0)
        per_cube[str(list(cid))] = {
            "family": family.as_dict(),
            "packing": packing.as_dict(),
            "certificate": cert,
            "sawtooth_inclusion": inclusion,
            "sawtooth_functional": saw_value,
        }
        all_ok = all_ok and ok
    return ("pass" if all_ok else "fail"), {"per_cube": per_cube}


def _stage_k_epsilon(bundle: ScenarioBundle) -> tuple:
    scn = bundle.scenario
    grid = bundle.grid()
    samples, T_levels = bundle.theta1()
    curve = []
    eps_sorted = sorted(scn.functionals["epsilons"])
    for eps in eps_sorted:
        val = K_epsilon(grid, bundle.whitney(), bundle.kernel(), eps,
                        cone_index=bundle.cone_index(), samples=samples,
                        T_levels=T_levels)
        curve.append({"eps": eps, "K": val})
    ks = [row["K"] for row in curve]
    monotone = _monotone_nonincreasing(ks)
    limit = scn.thresholds.get("k_epsilon_max")
    bounded = True if limit is None else all(k <= limit for k in ks)
    return ("pass" if monotone and bounded else "fail"), {
        "curve": curve, "monotone": monotone}


def _stage_level_sets(bundle: ScenarioBundle) -> tuple:
    scn = bundle.scenario
    grid = bundle.grid()
    samples, _ = bundle.theta1()
    p = scn.system_cfg.get("p", 2.0) if scn.system_cfg else 2.0
    rows = {}
    all_monotone = True
    for cube in grid.top_cubes:
        fr = [level_set_fraction(grid, bundle.whitney(), bundle.kernel(),
                                 cube.cube_id, N, p,
                                 cone_index=bundle.cone_index(),
                                 samples=samples)
              for N in scn.functionals["level_set_N"]]
        rows[str(list(cube.cube_id))] = fr
        all_monotone = all_monotone and _monotone_nonincreasing(fr)
    return ("pass" if all_monotone else "fail"), {
        "thresholds": scn.functionals["level_set_N"],
        "fractions": rows, "monotone": all_monotone}


def _stage_t1(bundle: ScenarioBundle) -> tuple:
    scn = bundle.scenario
    samples, _ = bundle.theta1()
    report = t1_check(bundle.grid(), bundle.whitney(), bundle.kernel(),
                      bundle.functions(), cone_index=bundle.cone_index(),
                      samples=samples,
                      refine=scn.functionals["refine"])
    if bundle.functions():
        family = build_approx_identity(bundle.grid(), bundle.bset())
        for label in sorted(bundle.functions()):
            report.residuals[label] = reproduce_residual(
                family, bundle.functions()[label])
    ok = True
    sup_limit = scn.thresholds.get("t1_constant_sup")
    if sup_limit is not None:
        ok = ok and report.constant_sup <= sup_limit
    ratio_range = scn.thresholds.get("global_ratio_range")
    if ratio_range is not None:
        lo, hi = ratio_range
        ok = ok and all(lo <= row["ratio"] <= hi for row in report.ratios)
    return ("pass" if ok else "fail"), report.as_dict()


def _stage_tail(bundle: ScenarioBundle) -> tuple:
    scn = bundle.scenario
    bset = bundle.bset()
    if bset.unbounded:
        return "skipped", {"reason": "set is unbounded (truncated window)"}
    tc = scn.tail_cfg
    functions = {"ones": np.ones(bset.n_nodes)}
    rng = np.random.default_rng(scn.seed)
    for i in range(tc.get("n_random", 0)):
        functions[f"rnd{i:02d}"] = rng.standard_normal(bset.n_nodes)
    report = bounded_tail(bset, bundle.kernel(), functions,
                          k_max_annulus=tc.get("k_max_annulus", 8),
                          n_radial=tc.get("n_radial", 16),
                          n_angular=tc.get("n_angular", 128))
    ok = True
    decay_range = scn.thresholds.get("tail_decay_range")
    if decay_range is not None:
        lo, hi = decay_range
        ok = ok and all(lo <= r <= hi for r in report.decay_ratios)
    limit = scn.thresholds.get("tail_total_over_norm_max")
    if limit is not None:
        ok = ok and all(row["total_over_norm"] <= limit
                        for row in report.per_function)
    return ("pass" if ok else "fail"), report.as_dict()


_STAGE_FNS = {
    "geometry": _stage_geometry,
    "grid": _stage_grid,
    "whitney": _stage_whitney,
    "kernel": _stage_kernel,
    "hypotheses": _stage_hypotheses,
    "stopping": _stage_stopping,
    "k_epsilon": _stage_k_epsilon,
    "level_sets": _stage_level_sets,
    "t1": _stage_t1,
    "tail": _stage_tail,
}

# stages that consume the test system after the hypothesis gate
_SYSTEM_DEPENDENT = ("stopping",)


@dataclass
class PipelineResult:
    scenario_name: str
    stages: list

    @property
    def all_passed(self) -> bool:
        return all(st["status"] in ("pass", "skipped") for st in self.stages)

    def stage(self, name: str) -> dict:
        for st in self.stages:
            if st["name"] == name:
                return st
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {
            "schema": 1,
            "scenario": self.scenario_name,
            "stages": self.stages,
            "all_passed": self.all_passed,
        }


def run_tb_pipeline(scenario: Scenario, only_stages=None,
                    bundle: ScenarioBundle | None = None) -> PipelineResult:
    """Run the configured stages in order and collect status + values.

    A failing "hypotheses" stage lets the run continue but marks dependent
    stages as hypotheses-not-met instead of executing them.  Passing a
    bundle lets the caller reuse the built objects afterwards.
    """
    if bundle is None:
        bundle = ScenarioBundle(scenario)
    selected = [s for s in PIPELINE_STAGES if s in scenario.stages
                and (only_stages is None or s in only_stages)]
    stages = []
    hypotheses_failed = False
    for name in selected:
        if name in _SYSTEM_DEPENDENT and hypotheses_failed:
            stages.append({"name": name, "status": "hypotheses-not-met",
                           "values": {}})
            continue
        status, values = _STAGE_FNS[name](bundle)
        if name == "hypotheses" and status == "fail":
            hypotheses_failed = True
        stages.append({"name": name, "status": status, "values": values})
    return PipelineResult(scenario_name=scenario.name, stages=stages)


def emit_convergence(scenario: Scenario, refinement_levels: int) -> dict:
    """Re-run the square-function metrics under dyadic refinement.

    Each level doubles the node resolution and deepens both hierarchies by
    one scale; rows collect K(eps), the constant-density chain sup, and the
    square-norm ratio of the first test function.
    """
    if refinement_levels < 2:
        raise ScenarioError(
            "refinement_levels: >= 2 levels required for a convergence study")
    rows = []
    eps0 = sorted(scenario.functionals["epsilons"])[0]
    for lvl in range(refinement_levels):
        cfg = json.loads(json.dumps(scenario.raw))
        cfg["set"]["resolution"] = scenario.set_cfg["resolution"] * (2 ** lvl)
        cfg["grid"]["k_max"] = scenario.grid_cfg["k_max"] + lvl
        cfg["whitney"]["k_max"] = scenario.whitney_cfg["k_max"] + lvl
        refined = scenario_from_dict(cfg)
        bundle = ScenarioBundle(refined)
        samples, T_levels = bundle.theta1()
        sup = K_epsilon(bundle.grid(), bundle.whitney(), bundle.kernel(),
                        0.0, cone_index=bundle.cone_index(), samples=samples,
                        T_levels=T_levels)
        k_eps = K_epsilon(bundle.grid(), bundle.whitney(), bundle.kernel(),
                          eps0, cone_index=bundle.cone_index(),
                          samples=samples, T_levels=T_levels)
        row = {
            "level": lvl,
            "resolution": cfg["set"]["resolution"],
            "n_boxes": bundle.whitney().n_boxes,
            "constant_sup": sup,
            "k_epsilon": k_eps,
        }
        functions = bundle.functions()
        if functions:
            label = sorted(functions)[0]
            f = functions[label]
            val = global_square_norm(bundle.whitney(), bundle.kernel(), f)
            norm_sq = float(np.sum(bundle.bset().weights * f * f))
            row["ratio_label"] = label
            row["global_ratio"] = val / norm_sq
        rows.append(row)
    return {"schema": 1, "scenario": scenario.name, "rows": rows}
