"""Local accretive-system checks and square-function functionals.

The operator side is discretized on Whitney boxes: for a density f the
per-box weight is |Theta f(Y_I)|^2 |I| / delta(Y_I)^(n+1), and a cube Q
collects the boxes of its aperture-beta collection into

    T(Q) = sum over I in C_Q of that weight.

Chain functionals sum T(Q') over the cubes Q' containing a node x (with
multiplicity across levels); this makes the mass identity

    sum_{Q' <= Q} T(Q') sigma(Q') = sum_{x in Q} w(x) chain(x)

exact, which is what the embedding and packing arguments consume.  Region
quantities (local square function, level-set fractions, sawtooth
inclusions) instead deduplicate boxes across the chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BoundarySet
from .dyadic import DyadicGrid
from .whitney import ConeIndex, ConeRegion, WhitneyDecomposition, cone
from .operators import (
    BoxSamples,
    Kernel,
    dyadic_average,
    dyadic_maximal,
    theta_apply,
    theta_constant,
    theta_on_boxes,
)


class TbError(ValueError):
    pass


# ---------------------------------------------------------------------------
# test systems

SYSTEM_GENERATORS = ("constant_one", "random_accretive", "patchy_accretive",
                     "zero")


@dataclass
class TestSystem:
    """Family of test densities indexed by cubes of one grid.

    values[cube_id] holds node values on the whole set; background[cube_id]
    is the constant the density takes beyond the truncation window (only
    meaningful on unbounded kinds, where Theta of the background constant
    is evaluated with its exact ray integrals).
    """

    C0: float
    p: float
    values: dict
    background: dict
    generator: str = "custom"

    @property
    def cube_ids(self) -> list:
        return sorted(self.values)


def generate_test_system(grid: DyadicGrid, generator: str, C0: float,
                         p: float, cube_ids, seed: int = 0,
                         amplitude: float = 0.4) -> TestSystem:
    if generator not in SYSTEM_GENERATORS:
        raise TbError(f"unknown system generator {generator!r}")
    if C0 <= 1.0:
        raise TbError(f"system.C0: must exceed 1, got {C0}")
    if not (1.0 < p <= 2.0):
        raise TbError(f"system.p: must lie in (1, 2], got {p}")
    rng = np.random.default_rng(seed)
    n = grid.bset.n_nodes
    values = {}
    background = {}
    for cid in cube_ids:
        cid = tuple(cid)
        if generator == "constant_one":
            values[cid] = np.ones(n)
            background[cid] = 1.0
        elif generator == "zero":
            values[cid] = np.zeros(n)
            background[cid] = 0.0
        elif generator == "random_accretive":
            values[cid] = 1.0 + amplitude * rng.uniform(-1.0, 1.0, size=n)
            background[cid] = 1.0
        else:  # patchy_accretive: flip sign on one strict subcube
            k0 = cid[0]
            depth = rng.integers(2, grid.k_max - k0 + 1)
            level_cubes = [c for c in grid.descendants(cid)
                           if c[0] == k0 + depth]
            patch = grid.cube(level_cubes[rng.integers(len(level_cubes))])
            vals = np.ones(n)
            vals[patch.member_nodes] = 1.0 - float(rng.uniform(1.0, 1.8))
            values[cid] = vals
            background[cid] = 1.0
    return TestSystem(C0=C0, p=p, values=values, background=background,
                      generator=generator)


def system_theta_samples(kernel: Kernel, whit: WhitneyDecomposition,
                         system: TestSystem, cube_id,
                         refine: int = 1) -> BoxSamples:
    """Theta b_Q on box quadrature nodes, background handled exactly."""
    cube_id = tuple(cube_id)
    pts, _ = whit.sample_points(refine)
    bg = system.background[cube_id]
    vals = np.zeros(len(pts))
    if bg != 0.0:
        vals += bg * theta_constant(kernel, pts)
    residual = system.values[cube_id] - bg
    if np.any(residual != 0.0):
        vals += theta_apply(kernel, residual, pts)
    delta = kernel.bset.delta(pts)
    m = refine ** whit.dim
    return BoxSamples(refine=refine,
                      values=vals.reshape(whit.n_boxes, m),
                      delta=delta.reshape(whit.n_boxes, m),
                      volumes=whit.volumes())


# ---------------------------------------------------------------------------
# chain functionals

def _cube_T_levels(grid: DyadicGrid, cone_index: ConeIndex,
                   box_terms: np.ndarray) -> list:
    """Per level, array of T(Q) = sum of box terms over each cube's collection."""
    out = []
    for cubes in grid.levels:
        out.append(np.array([
            float(box_terms[cone_index.boxes(c.cube_id)].sum())
            for c in cubes]))
    return out


def _family_shadow_masks(grid: DyadicGrid, family) -> list:
    """Per level, marks cubes contained in (or equal to) a family member."""
    masks = [np.zeros(len(cubes), dtype=bool) for cubes in grid.levels]
    for fid in family:
        fm = grid.descendant_mask(tuple(fid))
        for li in range(grid.n_levels):
            masks[li] |= fm[li]
    return masks


CARLESON_VARIANTS = ("gamma", "truncated", "sawtooth")


def carleson_functional(grid: DyadicGrid, whit: WhitneyDecomposition,
                        kernel: Kernel, f: np.ndarray | None, Q,
                        variant: str = "gamma", q: float = 2.0,
                        eps: float | None = None, family=None,
                        cone_index: ConeIndex | None = None,
                        samples: BoxSamples | None = None,
                        T_levels: list | None = None,
                        refine: int = 1) -> float:
    """Normalized chain functional of Theta f over the cube Q.

    (1/sigma(Q)) sum_{x in Q} w(x) (sum_{Q' in chain} T(Q'))^(q/2), where the
    chain runs over Q' containing x with Q' <= Q, filtered per variant:
    "truncated" keeps eps < ell(Q') < 1/eps (strict), "sawtooth" keeps cubes
    not contained in any member of the stopping family.  f=None means the
    constant density (with its exact tails on truncated sets).
    """
    if variant not in CARLESON_VARIANTS:
        raise TbError(f"unknown functional variant {variant!r}")
    if variant == "truncated" and eps is None:
        raise TbError("variant 'truncated' requires eps")
    if variant == "sawtooth" and family is None:
        raise TbError("variant 'sawtooth' requires the stopping family")
    if q <= 0:
        raise TbError(f"exponent q must be positive, got {q}")
    if cone_index is None:
        cone_index = ConeIndex(whit, grid)
    if samples is None:
        samples = theta_on_boxes(kernel, whit, f=f, refine=refine)
    if T_levels is None:
        T_levels = _cube_T_levels(grid, cone_index,
                                  samples.square_terms(grid.bset.n + 1))
    Q = tuple(Q)
    masks = grid.descendant_mask(Q)
    if variant == "sawtooth":
        shadow = _family_shadow_masks(grid, family)
        masks = [m & ~s for m, s in zip(masks, shadow)]
    cube = grid.cube(Q)
    nodes = cube.member_nodes
    chain = np.zeros(len(nodes))
    for li in range(grid.level_pos(Q[0]), grid.n_levels):
        k = grid.k_min + li
        if variant == "truncated":
            ell = 2.0 ** (-k)
            if not (eps < ell < 1.0 / eps):
                continue
        t_here = np.where(masks[li], T_levels[li], 0.0)
        chain += t_here[grid.node_cube[li, nodes]]
    w = grid.bset.weights[nodes]
    return float(np.sum(w * chain ** (q / 2.0)) / cube.measure)


def local_square_function(cone_region: ConeRegion, samples: BoxSamples,
                          n: int) -> float:
    """Deduplicated box sum of |Theta|^2 |I| / delta^(n+1) over the region."""
    ids = cone_region.box_ids
    if np.any(ids >= len(samples.volumes)):
        raise TbError("cone region indexes boxes outside the sample set")
    return float(samples.square_terms(n + 1)[ids].sum())


def K_epsilon(grid: DyadicGrid, whit: WhitneyDecomposition, kernel: Kernel,
              eps: float, cone_index: ConeIndex | None = None,
              samples: BoxSamples | None = None,
              T_levels: list | None = None) -> float:
    """sup over all cubes of the truncated chain functional of Theta 1.

    eps=0 removes the truncation (every chain level contributes).
    """
    if eps < 0:
        raise TbError(f"eps must be nonnegative, got {eps}")
    if cone_index is None:
        cone_index = ConeIndex(whit, grid)
    if samples is None:
        samples = theta_on_boxes(kernel, whit, f=None)
    if T_levels is None:
        T_levels = _cube_T_levels(grid, cone_index,
                                  samples.square_terms(grid.bset.n + 1))
    best = 0.0
    for cube in grid.all_cubes():
        variant = "gamma" if eps == 0 else "truncated"
        val = carleson_functional(
            grid, whit, kernel, None, cube.cube_id, variant=variant, q=2.0,
            eps=(None if eps == 0 else eps), cone_index=cone_index,
            samples=samples, T_levels=T_levels)
        best = max(best, val)
    return best


def level_set_fraction(grid: DyadicGrid, whit: WhitneyDecomposition,
                       kernel: Kernel, Q, N: float, p: float,
                       cone_index: ConeIndex | None = None,
                       samples: BoxSamples | None = None) -> float:
    """sigma-fraction of Q where the rooted region square function beats N.

    g(x) = (box-deduplicated integral over the rooted cone of x)^(p/2); the
    region is constant on each finest-level cube, so work runs per cube.
    """
    if N < 0:
        raise TbError(f"threshold N must be nonnegative, got {N}")
    if cone_index is None:
        cone_index = ConeIndex(whit, grid)
    if samples is None:
        samples = theta_on_boxes(kernel, whit, f=None)
    Q = tuple(Q)
    terms = samples.square_terms(grid.bset.n + 1)
    heavy_mass = 0.0
    stack = [(Q, [cone_index.boxes(Q)])]
    while stack:
        cid, parts = stack.pop()
        kids = grid.children_of(cid)
        if not kids:
            ids = np.unique(np.concatenate(parts)) if parts else np.empty(0, np.int64)
            g = float(terms[ids].sum()) ** (p / 2.0)
            if g > N:
                heavy_mass += grid.cube(cid).measure
            continue
        for kid in kids:
            stack.append((kid, parts + [cone_index.boxes(kid)]))
    return heavy_mass / grid.cube(Q).measure


# ---------------------------------------------------------------------------
# stopping time, good cubes, packing

@dataclass
class StoppingFamily:
    parent: tuple
    members: list
    degenerate: bool
    eta: float

    def as_dict(self) -> dict:
        return {
            "parent": list(self.parent),
            "members": [list(m) for m in self.members],
            "degenerate": self.degenerate,
            "eta": self.eta,
        }


def stopping_time(grid: DyadicGrid, Q, b_values: np.ndarray, C0: float
                  ) -> StoppingFamily:
    """Maximal subcubes where the running average of b drops below 1/C0.

    If Q itself satisfies the stopping condition the family degenerates to
    {Q} and is flagged; every surviving cube then certifies a mean of
    modulus above 1/C0.
    """
    Q = tuple(Q)
    threshold = 1.0 / C0

    def low(cid):
        return np.real(dyadic_average(grid, b_values, cid)) <= threshold

    if low(Q):
        return StoppingFamily(parent=Q, members=[Q], degenerate=True,
                              eta=0.0)
    members = []
    stack = list(reversed(grid.children_of(Q)))
    while stack:
        cid = stack.pop()
        if low(cid):
            members.append(cid)
        else:
            stack.extend(reversed(grid.children_of(cid)))
    sigma_q = grid.cube(Q).measure
    covered = sum(grid.cube(m).measure for m in members)
    return StoppingFamily(parent=Q, members=members, degenerate=False,
                          eta=1.0 - covered / sigma_q)


def good_cubes(grid: DyadicGrid, Q, family) -> list:
    """Subcubes of Q escaping the stopping family, by both definitions.

    Tree form: no ancestor-or-self among the family.  Intersection form:
    meets no member, or is strictly coarser than every member it meets.
    The two must agree cube-for-cube; disagreement raises.
    """
    Q = tuple(Q)
    family = [tuple(f) for f in family]
    desc = grid.descendants(Q)

    tree_good = [c for c in desc
                 if not any(grid.is_descendant(c, f) for f in family)]

    bad = set()
    for f in family:
        fc = grid.cube(f)
        for li in range(grid.level_pos(f[0]), grid.n_levels):
            k = grid.k_min + li
            hit = np.unique(grid.node_cube[li, fc.member_nodes])
            bad.update((k, int(j)) for j in hit)
    inter_good = [c for c in desc if c not in bad]

    if tree_good != inter_good:
        raise TbError("good-cube definitions disagree; grid nesting broken")
    return tree_good


def certificate_check(grid: DyadicGrid, Q, b_values: np.ndarray, C0: float,
                      family) -> dict:
    """Verify |mean of b| >= 1/C0 on every good cube; returns the margin."""
    good = good_cubes(grid, Q, family)
    worst = math.inf
    for cid in good:
        worst = min(worst, abs(dyadic_average(grid, b_values, cid)))
    return {
        "n_good": len(good),
        "min_abs_mean": worst if good else None,
        "passed": (not good) or worst >= 1.0 / C0,
    }


@dataclass
class PackingReport:
    eta: float
    degenerate: bool
    family_size: int
    lambda_nested_ok: bool
    passed: bool

    def as_dict(self) -> dict:
        return {
            "eta": self.eta,
            "degenerate": self.degenerate,
            "family_size": self.family_size,
            "lambda_nested_ok": self.lambda_nested_ok,
            "passed": self.passed,
        }


def verify_packing(grid: DyadicGrid, Q, b_values: np.ndarray, C0: float,
                   lambdas=(2.0, 4.0)) -> PackingReport:
    """Check leftover mass is positive and stricter thresholds only shrink.

    For lam > 1 the family at lam*C0 must sit inside the original one
    member-by-member (each new member contained in an old member or good).
    """
    base = stopping_time(grid, Q, b_values, C0)
    nested_ok = True
    for lam in lambdas:
        tight = stopping_time(grid, Q, b_values, lam * C0)
        for m in tight.members:
            inside = any(grid.is_descendant(m, f) for f in base.members)
            if not inside and base.members:
                # a tighter-threshold member must satisfy the looser
                # condition as well, hence lie inside the maximal family
                nested_ok = False
        covered_tight = sum(grid.cube(m).measure for m in tight.members)
        covered_base = sum(grid.cube(m).measure for m in base.members)
        if covered_tight > covered_base + 1e-12:
            nested_ok = False
    return PackingReport(
        eta=base.eta,
        degenerate=base.degenerate,
        family_size=len(base.members),
        lambda_nested_ok=nested_ok,
        passed=(not base.degenerate) and base.eta > 0.0 and nested_ok,
    )


def sawtooth_inclusion_check(grid: DyadicGrid, whit: WhitneyDecomposition,
                             cone_index: ConeIndex, Q, family,
                             eps: float) -> dict:
    """Count box-level violations of the sawtooth cone splitting.

    For each family member Q_k and node x in Q_k, the truncated rooted cone
    over x must sit inside the cone rooted at Q_k joined with the good-cube
    cone.  Regions agree on all nodes of a finest cube, so one check per
    finest cube suffices.
    """
    Q = tuple(Q)
    checked = 0
    violations = 0
    for fid in family:
        fid = tuple(fid)
        finest = [c for c in grid.descendants(fid) if c[0] == grid.k_max]
        for leaf in finest:
            x = int(grid.cube(leaf).member_nodes[0])
            full = cone(whit, grid, x, {"kind": "gamma_eps", "Q": Q,
                                        "eps": eps}, cone_index)
            local = cone(whit, grid, x, {"kind": "gamma_eps", "Q": fid,
                                         "eps": eps}, cone_index)
            good = cone(whit, grid, x, {"kind": "gamma_good", "Q": Q,
                                        "F": family, "eps": eps}, cone_index)
            allowed = np.union1d(local.box_ids, good.box_ids)
            extra = np.setdiff1d(full.box_ids, allowed)
            checked += 1
            violations += int(len(extra) > 0)
    return {"n_checked": checked, "violations": violations}


# ---------------------------------------------------------------------------
# hypotheses, embedding, t1, tails

@dataclass
class HypothesesReport:
    per_cube: dict
    passed: bool

    def as_dict(self) -> dict:
        return {
            "per_cube": {str(list(k)): v for k, v in sorted(self.per_cube.items())},
            "passed": self.passed,
        }


def verify_tb_hypotheses(system: TestSystem, grid: DyadicGrid,
                         whit: WhitneyDecomposition, kernel: Kernel,
                         cone_index: ConeIndex | None = None,
                         samples_map: dict | None = None,
                         refine: int = 1) -> HypothesesReport:
    """Check the three accretive-system conditions on every indexed cube.

    Mass lower bound |avg_Q b| >= 1/C0, p-norm upper bound over the node
    set, and the rooted chain functional of Theta b at exponent p bounded
    by C0.  Integrals run over the node model; on truncated kinds the
    functional sees the declared background through its exact tails.
    samples_map may precompute (BoxSamples, T_levels) per cube id.
    """
    if cone_index is None:
        cone_index = ConeIndex(whit, grid)
    bset = grid.bset
    w = bset.weights
    per_cube = {}
    all_ok = True
    for cid in system.cube_ids:
        cube = grid.cube(cid)
        b = system.values[cid]
        mean = dyadic_average(grid, b, cid)
        mass_ok = abs(mean) >= 1.0 / system.C0
        p_norm = float(np.sum(w * np.abs(b) ** system.p))
        p_ok = p_norm <= system.C0 * cube.measure * (1 + 1e-12)
        if samples_map is not None:
            samples, T_levels = samples_map[cid]
        else:
            samples = system_theta_samples(kernel, whit, system, cid,
                                           refine=refine)
            T_levels = None
        functional = carleson_functional(
            grid, whit, kernel, None, cid, variant="gamma", q=system.p,
            cone_index=cone_index, samples=samples, T_levels=T_levels)
        func_ok = functional <= system.C0 * (1 + 1e-12)
        per_cube[tuple(cid)] = {
            "mean": mean,
            "mass_lower_ok": bool(mass_ok),
            "p_norm": p_norm,
            "p_norm_upper_ok": bool(p_ok),
            "functional": functional,
            "functional_ok": bool(func_ok),
        }
        all_ok = all_ok and mass_ok and p_ok and func_ok
    return HypothesesReport(per_cube=per_cube, passed=all_ok)


class CarlesonCoefficients:
    """Nonnegative per-cube coefficients with their packing norm."""

    def __init__(self, grid: DyadicGrid, values: dict):
        self._grid = grid
        self.values = {tuple(k): float(v) for k, v in values.items()}
        bad = [k for k, v in self.values.items() if v < 0]
        if bad:
            raise TbError(f"alpha: negative coefficient at cube {bad[0]}")
        self.norm = self._packing_norm()

    def _packing_norm(self) -> float:
        grid = self._grid
        sub = {}
        best = 0.0
        for li in range(grid.n_levels - 1, -1, -1):
            for cube in grid.levels[li]:
                cid = cube.cube_id
                total = self.values.get(cid, 0.0) * cube.measure
                total += sum(sub[kid] for kid in grid.children_of(cid))
                sub[cid] = total
                best = max(best, total / cube.measure)
        return best

    def scaled(self, factor: float):
        return CarlesonCoefficients(
            self._grid, {k: v * factor for k, v in self.values.items()})


def carleson_embedding_check(grid: DyadicGrid, alpha: CarlesonCoefficients,
                             f: np.ndarray) -> dict:
    """Compare sum_Q alpha_Q sigma(Q) |avg_Q f|^2 with the maximal function.

    Returns lhs, rhs = integral of (max cube average)^2, and the ratio
    lhs / (norm(alpha) * rhs); the embedding bound keeps the ratio O(1).
    """
    f = np.asarray(f, dtype=float)
    lhs = 0.0
    for cid, a in alpha.values.items():
        if a == 0.0:
            continue
        cube = grid.cube(cid)
        lhs += a * cube.measure * dyadic_average(grid, f, cid) ** 2
    m = dyadic_maximal(grid, f)
    rhs = float(np.sum(grid.bset.weights * m ** 2))
    denom = alpha.norm * rhs
    ratio = lhs / denom if denom > 0 else 0.0
    return {"lhs": lhs, "rhs": rhs, "norm": alpha.norm, "ratio": ratio}


def embedding_layer_cake(grid: DyadicGrid, alpha: CarlesonCoefficients,
                         f: np.ndarray) -> float:
    """Brute-force layer-cake bound for the same sum, for cross-checking.

    Integrates mu({A > lam}) over lam where mu gives each cube mass
    alpha_Q sigma(Q) and A is the cube's |f| average; the embedding proof
    bounds each slice by norm(alpha) times the maximal level set.
    """
    f = np.asarray(f, dtype=float)
    entries = []
    for cid, a in alpha.values.items():
        if a == 0.0:
            continue
        cube = grid.cube(cid)
        avg = abs(dyadic_average(grid, f, cid))
        entries.append((avg ** 2, a * cube.measure))
    if not entries:
        return 0.0
    entries.sort()
    heights = np.array([e[0] for e in entries])
    masses = np.array([e[1] for e in entries])
    tail = np.cumsum(masses[::-1])[::-1]
    prev = 0.0
    total = 0.0
    for h, t in zip(heights, tail):
        total += (h - prev) * t
        prev = h
    return float(total)


@dataclass
class T1Report:
    constant_sup: float
    ratios: list
    residuals: dict

    def as_dict(self) -> dict:
        return {
            "constant_sup": self.constant_sup,
            "ratios": self.ratios,
            "residuals": self.residuals,
        }


def t1_check(grid: DyadicGrid, whit: WhitneyDecomposition, kernel: Kernel,
             test_functions: dict, cone_index: ConeIndex | None = None,
             samples: BoxSamples | None = None, refine: int = 1) -> T1Report:
    """Constant-density chain sup plus square-norm ratios per test function.

    test_functions maps labels to node arrays; each ratio is the global
    square norm of Theta f over the boxes divided by the squared l2 norm
    of f against the surface measure.
    """
    if cone_index is None:
        cone_index = ConeIndex(whit, grid)
    if samples is None:
        samples = theta_on_boxes(kernel, whit, f=None, refine=refine)
    sup = K_epsilon(grid, whit, kernel, eps=0.0, cone_index=cone_index,
                    samples=samples)
    w = grid.bset.weights
    ratios = []
    for label in sorted(test_functions):
        f = np.asarray(test_functions[label], dtype=float)
        fs = theta_on_boxes(kernel, whit, f=f, refine=refine)
        norm_sq = float(np.sum(w * f * f))
        if norm_sq == 0.0:
            raise TbError(f"test function {label!r} has zero norm")
        val = float(np.sum(fs.square_terms(power=1.0)))
        ratios.append({"label": label, "ratio": val / norm_sq,
                       "square_norm": val, "f_norm_sq": norm_sq})
    return T1Report(constant_sup=sup, ratios=ratios, residuals={})


@dataclass
class TailReport:
    annuli: dict
    decay_ratios: list
    total: float
    per_function: list

    def as_dict(self) -> dict:
        return {
            "annuli": {str(k): v for k, v in sorted(self.annuli.items())},
            "decay_ratios": self.decay_ratios,
            "total": self.total,
            "per_function": self.per_function,
        }


def _annulus_quadrature(center: np.ndarray, r_lo: float, r_hi: float,
                        dim: int, n_radial: int, n_angular: int):
    """Midpoint product rule on a circular or spherical annulus."""
    radii = r_lo + (np.arange(n_radial) + 0.5) * (r_hi - r_lo) / n_radial
    dr = (r_hi - r_lo) / n_radial
    if dim == 2:
        ang = (np.arange(n_angular) + 0.5) * 2.0 * math.pi / n_angular
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        pts = center + (radii[:, None, None] * dirs[None, :, :]).reshape(-1, 2)
        wts = np.repeat(radii * dr * 2.0 * math.pi / n_angular, n_angular)
        return pts, wts
    idx = np.arange(n_angular)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    z = 1.0 - (idx + 0.5) * 2.0 / n_angular
    rad = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = idx * golden
    dirs = np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
    pts = center + (radii[:, None, None] * dirs[None, :, :]).reshape(-1, 3)
    wts = np.repeat(radii ** 2 * dr * 4.0 * math.pi / n_angular, n_angular)
    return pts, wts


def bounded_tail(bset: BoundarySet, kernel: Kernel, functions: dict,
                 k_max_annulus: int = 8, n_radial: int = 16,
                 n_angular: int = 128) -> TailReport:
    """Far-field square-function mass over dyadic annuli around the set.

    The set sits in the ball of radius diam around its weighted centroid;
    annulus k spans radii [2^k, 2^(k+1)] times that radius, starting at
    k=3.  Each entry integrates |Theta f|^2 / delta and successive annuli
    should decay like 2^(-n).
    """
    if bset.unbounded:
        raise TbError("bounded tail needs a bounded set")
    if k_max_annulus < 4:
        raise TbError("need at least two annuli (k_max_annulus >= 4)")
    w = bset.weights
    center = (w[:, None] * bset.points).sum(axis=0) / w.sum()
    r0 = bset.diameter
    per_function = []
    first_annuli = {}
    first_ratios = []
    first_total = 0.0
    for label in sorted(functions):
        f = np.asarray(functions[label], dtype=float)
        annuli = {}
        for k in range(3, k_max_annulus + 1):
            pts, wts = _annulus_quadrature(
                center, 2.0 ** k * r0, 2.0 ** (k + 1) * r0,
                bset.ambient_dim, n_radial, n_angular)
            theta = theta_apply(kernel, f, pts)
            delta = bset.delta(pts)
            annuli[k] = float(np.sum(wts * theta ** 2 / delta))
        keys = sorted(annuli)
        ratios = [annuli[b] / annuli[a] if annuli[a] > 0 else math.nan
                  for a, b in zip(keys, keys[1:])]
        total = float(sum(annuli.values()))
        norm_sq = float(np.sum(w * f * f))
        per_function.append({
            "label": label,
            "total": total,
            "f_norm_sq": norm_sq,
            "total_over_norm": total / norm_sq if norm_sq > 0 else math.nan,
            "decay_ratios": ratios,
        })
        if not first_annuli:
            first_annuli = annuli
            first_ratios = ratios
            first_total = total
    return TailReport(annuli=first_annuli, decay_ratios=first_ratios,
                      total=first_total, per_function=per_function)
