"""Dyadic cube hierarchies on discretized boundary sets.

Cubes at level k are node subsets of scale 2^-k forming a nested partition
family: each level partitions the node set, children partition their parent,
diameters and measures are comparable to 2^-k, each cube contains a surface
ball around its center, and the mass near a cube's boundary decays like a
power of the strip width.

Construction is greedy ball capture: within each parent, the lowest-id
uncaptured node seeds a cube and captures every uncaptured parent node at
strict distance < 2^-k.  Runt cubes (measure below a fixed fraction of the
largest sibling) are merged into their nearest full-size sibling, then each
cube is re-centered at the member node closest to the weighted centroid.
Capture order makes the result deterministic; strict inequality keeps
exactly-touching structures (Cantor cell gaps) in separate cubes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    CANTOR,
    CIRCLE,
    GRAPH,
    SEGMENT,
    SPHERE,
    BoundarySet,
)

# Children below this fraction of the median sibling's measure are merged.
# The median, not the max: the first capture cell grows on both sides of its
# seed and can legitimately weigh twice a typical cell.
MERGE_FRACTION = 0.6


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridConstants:
    """Declared grid regularity constants, checked by verify_grid.

    capture_mult scales the capture radius at each level. The four-corner
    set needs 1.5: the radius must clear the cell diagonal (~1.06 x side)
    without reaching the next cell (2 x side), so that every cube is one
    self-similar cell.
    """

    alpha0: float = 0.25
    eta_thin: float = 0.8
    c1: float = 4.0
    c2: float = 4.0
    capture_mult: float = 1.0


DEFAULT_CONSTANTS = {
    SEGMENT: GridConstants(alpha0=0.4, eta_thin=1.0, c1=2.5, c2=2.5),
    GRAPH: GridConstants(alpha0=0.2, eta_thin=1.0, c1=3.0, c2=6.0),
    CIRCLE: GridConstants(alpha0=0.25, eta_thin=1.0, c1=4.0, c2=3.0),
    SPHERE: GridConstants(alpha0=0.05, eta_thin=0.8, c1=8.0, c2=8.0),
    CANTOR: GridConstants(alpha0=0.25, eta_thin=1.0, c1=3.0, c2=3.0,
                          capture_mult=1.5),
}


@dataclass
class DyadicCube:
    level: int
    index: int
    member_nodes: np.ndarray
    center: int
    measure: float
    parent: int | None
    children: list = field(default_factory=list)
    bbox_lo: np.ndarray | None = None
    bbox_hi: np.ndarray | None = None

    @property
    def length(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def cube_id(self):
        return (self.level, self.index)


class DyadicGrid:
    """Nested cube hierarchy over the levels k_min..k_max."""

    def __init__(self, bset: BoundarySet, k_min: int, k_max: int,
                 levels: list, constants: GridConstants):
        self.bset = bset
        self.k_min = k_min
        self.k_max = k_max
        self.levels = levels
        self.constants = constants
        n = bset.n_nodes
        self.node_cube = np.empty((len(levels), n), dtype=np.int64)
        for li, cubes in enumerate(levels):
            for cube in cubes:
                self.node_cube[li, cube.member_nodes] = cube.index

    def level_pos(self, k: int) -> int:
        if not (self.k_min <= k <= self.k_max):
            raise GridError(f"level {k} outside grid range [{self.k_min}, {self.k_max}]")
        return k - self.k_min

    def cubes(self, k: int) -> list:
        return self.levels[self.level_pos(k)]

    def cube(self, cube_id) -> DyadicCube:
        k, j = cube_id
        return self.cubes(k)[j]

    @property
    def top_cubes(self) -> list:
        return self.levels[0]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def all_cubes(self):
        for cubes in self.levels:
            yield from cubes

    def locate(self, x: int, k: int):
        """Id of the unique level-k cube containing node x."""
        if not (0 <= x < self.bset.n_nodes):
            raise GridError(f"node id {x} not in node set")
        return (k, int(self.node_cube[self.level_pos(k), x]))

    def parent_of(self, cube_id):
        cube = self.cube(cube_id)
        if cube.parent is None:
            return None
        return (cube.level - 1, cube.parent)

    def children_of(self, cube_id):
        cube = self.cube(cube_id)
        return [(cube.level + 1, j) for j in cube.children]

    def descendants(self, cube_id, predicate=None) -> list:
        """Strict-or-equal descendants in depth-first order."""
        out = []
        stack = [cube_id]
        while stack:
            cid = stack.pop()
            cube = self.cube(cid)
            if predicate is None or predicate(cube):
                out.append(cid)
            stack.extend(reversed(self.children_of(cid)))
        return out

    def is_descendant(self, cube_id, ancestor_id) -> bool:
        """True when ancestor_id is an ancestor of (or equals) cube_id."""
        k_a, j_a = ancestor_id
        k, j = cube_id
        if k < k_a:
            return False
        while k > k_a:
            parent = self.cube((k, j)).parent
            if parent is None:
                return False
            k, j = k - 1, parent
        return j == j_a

    def ancestor_at(self, cube_id, k: int):
        cid = cube_id
        while cid[0] > k:
            cid = self.parent_of(cid)
            if cid is None:
                raise GridError(f"no ancestor of {cube_id} at level {k}")
        if cid[0] != k:
            raise GridError(f"no ancestor of {cube_id} at level {k}")
        return cid

    def chain(self, x: int) -> list:
        """Cube ids containing node x, one per level, coarse to fine."""
        return [(self.k_min + li, int(self.node_cube[li, x]))
                for li in range(self.n_levels)]

    def descendant_mask(self, cube_id) -> list:
        """Per level, boolean array marking descendants-or-self of cube_id."""
        k0, j0 = cube_id
        masks = []
        for li in range(self.n_levels):
            k = self.k_min + li
            cubes = self.levels[li]
            if k < k0:
                masks.append(np.zeros(len(cubes), dtype=bool))
            elif k == k0:
                m = np.zeros(len(cubes), dtype=bool)
                m[j0] = True
                masks.append(m)
            else:
                prev = masks[-1]
                m = np.array([prev[c.parent] for c in cubes], dtype=bool)
                masks.append(m)
        return masks

    def to_json(self) -> str:
        cubes = []
        for cube in self.all_cubes():
            cubes.append({
                "k": cube.level,
                "j": cube.index,
                "parent": cube.parent,
                "children": list(cube.children),
                "center": cube.center,
                "node_ids": cube.member_nodes.tolist(),
                "measure": cube.measure,
            })
        payload = {
            "constants": {
                "alpha0": self.constants.alpha0,
                "eta_thin": self.constants.eta_thin,
                "c1": self.constants.c1,
                "c2": self.constants.c2,
                "capture_mult": self.constants.capture_mult,
            },
            "k_min": self.k_min,
            "k_max": self.k_max,
            "cubes": cubes,
        }
        return json.dumps(payload, sort_keys=True)


def save_grid(grid: DyadicGrid, path) -> None:
    Path(path).write_text(grid.to_json())


def _greedy_capture(bset: BoundarySet, member_ids: np.ndarray, radius: float):
    """Split member_ids into capture groups; returns (groups, seed_ids)."""
    pts = bset.points
    tree = bset.tree
    in_play = np.zeros(bset.n_nodes, dtype=bool)
    in_play[member_ids] = True
    r2 = radius * radius
    groups = []
    seeds = []
    for seed in member_ids:
        if not in_play[seed]:
            continue
        cand = np.array(tree.query_ball_point(pts[seed], radius), dtype=np.int64)
        cand = cand[in_play[cand]]
        d2 = np.sum((pts[cand] - pts[seed]) ** 2, axis=1)
        captured = cand[d2 < r2]
        in_play[captured] = False
        groups.append(np.sort(captured))
        seeds.append(int(seed))
    return groups, seeds


def _merge_runts(bset: BoundarySet, groups, seeds):
    """Merge children lighter than MERGE_FRACTION of the median sibling."""
    if len(groups) <= 1:
        return groups
    w = bset.weights
    measures = np.array([w[g].sum() for g in groups])
    cutoff = MERGE_FRACTION * float(np.median(measures))
    full = [i for i, m in enumerate(measures) if m >= cutoff]
    runts = [i for i, m in enumerate(measures) if m < cutoff]
    if not runts:
        return groups
    seed_pts = bset.points[np.array(seeds)]
    merged = {i: [groups[i]] for i in full}
    for i in runts:
        d2 = np.sum((seed_pts[full] - seed_pts[i]) ** 2, axis=1)
        target = full[int(np.argmin(d2))]
        merged[target].append(groups[i])
    return [np.sort(np.concatenate(merged[i])) for i in full]


def _recenter(bset: BoundarySet, members: np.ndarray) -> int:
    pts = bset.points[members]
    w = bset.weights[members]
    centroid = (w[:, None] * pts).sum(axis=0) / w.sum()
    d2 = np.sum((pts - centroid) ** 2, axis=1)
    return int(members[int(np.argmin(d2))])


def build_grid(bset: BoundarySet, k_min: int, k_max: int,
               constants: GridConstants | None = None) -> DyadicGrid:
    """Build the cube hierarchy for levels k_min (coarsest) to k_max."""
    if k_min > k_max:
        raise GridError(f"k_min={k_min} exceeds k_max={k_max}")
    spacing = bset.node_spacing()
    if 2.0 ** (-k_max) < 2.0 * spacing:
        raise GridError(
            f"resolution too coarse for level k_max={k_max}: "
            f"2^-{k_max} < 2 x node spacing {spacing:.3g}")
    if 2.0 ** (-k_min) > 16.0 * bset.diameter:
        raise GridError(
            f"k_min={k_min} inconsistent with diameter {bset.diameter:.3g}")
    if constants is None:
        constants = DEFAULT_CONSTANTS[bset.kind]

    all_nodes = np.arange(bset.n_nodes, dtype=np.int64)
    levels = []
    parent_groups = [all_nodes]
    parent_index_of = [None]
    for k in range(k_min, k_max + 1):
        radius = constants.capture_mult * 2.0 ** (-k)
        cubes = []
        groups_this = []
        parents_this = []
        for p_idx, parent_members in enumerate(parent_groups):
            groups, seeds = _greedy_capture(bset, parent_members, radius)
            groups = _merge_runts(bset, groups, seeds)
            for g in groups:
                groups_this.append(g)
                parents_this.append(parent_index_of[p_idx])
        for j, g in enumerate(groups_this):
            pts = bset.points[g]
            cube = DyadicCube(
                level=k,
                index=j,
                member_nodes=g,
                center=_recenter(bset, g),
                measure=float(bset.weights[g].sum()),
                parent=parents_this[j],
                bbox_lo=pts.min(axis=0),
                bbox_hi=pts.max(axis=0),
            )
            cubes.append(cube)
        if k > k_min:
            for cube in cubes:
                levels[-1][cube.parent].children.append(cube.index)
        levels.append(cubes)
        parent_groups = [c.member_nodes for c in cubes]
        parent_index_of = list(range(len(cubes)))
    return DyadicGrid(bset, k_min, k_max, levels, constants)


@dataclass
class PropertyCheck:
    passed: bool
    detail: dict


@dataclass
class GridReport:
    partition: PropertyCheck
    nesting: PropertyCheck
    unique_parent: PropertyCheck
    size_bounds: PropertyCheck
    surface_ball: PropertyCheck
    thin_boundary: PropertyCheck

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in (
            self.partition, self.nesting, self.unique_parent,
            self.size_bounds, self.surface_ball, self.thin_boundary))

    def as_dict(self) -> dict:
        out = {}
        for name in ("partition", "nesting", "unique_parent", "size_bounds",
                     "surface_ball", "thin_boundary"):
            check = getattr(self, name)
            out[name] = {"passed": check.passed, **check.detail}
        out["all_passed"] = self.all_passed
        return out


def _foreign_distances(grid: DyadicGrid, li: int, reach: float) -> np.ndarray:
    """Per node, distance to the nearest node in a different level-li cube.

    Distances beyond `reach` are reported as inf; pairs of cubes whose
    bounding boxes are farther than `reach` apart are skipped.
    """
    bset = grid.bset
    cubes = grid.levels[li]
    n = bset.n_nodes
    out = np.full(n, np.inf)
    if len(cubes) < 2:
        return out
    trees = [cKDTree(bset.points[c.member_nodes]) for c in cubes]
    los = np.array([c.bbox_lo for c in cubes])
    his = np.array([c.bbox_hi for c in cubes])
    for a, cube in enumerate(cubes):
        gap = np.maximum(np.maximum(los - his[a], los[a] - his), 0.0)
        near = np.flatnonzero(np.linalg.norm(gap, axis=1) <= reach)
        pts_a = bset.points[cube.member_nodes]
        best = np.full(len(pts_a), np.inf)
        for b in near:
            if b == a:
                continue
            d, _ = trees[b].query(pts_a, distance_upper_bound=reach)
            best = np.minimum(best, d)
        out[cube.member_nodes] = best
    return out


def verify_grid(grid: DyadicGrid, tau_samples: int = 8,
                tau_min: float = 0.08) -> GridReport:
    """Check the six structural grid properties and fit the declared constants."""
    bset = grid.bset
    cons = grid.constants
    n = bset.n_nodes

    # (1) each level partitions the node set
    part_ok = True
    for li, cubes in enumerate(grid.levels):
        counts = np.zeros(n, dtype=np.int64)
        for cube in cubes:
            counts[cube.member_nodes] += 1
        if not np.all(counts == 1):
            part_ok = False
            break
    partition = PropertyCheck(part_ok, {"levels": grid.n_levels})

    # (2)+(3) children partition the parent; parent unique by construction
    nest_ok = True
    for li in range(1, grid.n_levels):
        for cube in grid.levels[li]:
            parent = grid.levels[li - 1][cube.parent]
            if not np.all(np.isin(cube.member_nodes, parent.member_nodes)):
                nest_ok = False
    for li in range(grid.n_levels - 1):
        for cube in grid.levels[li]:
            child_total = sum(
                len(grid.levels[li + 1][j].member_nodes) for j in cube.children)
            if child_total != len(cube.member_nodes):
                nest_ok = False
    nesting = PropertyCheck(nest_ok, {})
    unique_parent = PropertyCheck(nest_ok, {})

    # (4) diameter and measure comparable to the scale
    worst_c1 = 0.0
    size_ok = True
    for cubes in grid.levels:
        for cube in cubes:
            scale = cube.length
            diam_ub = float(np.linalg.norm(cube.bbox_hi - cube.bbox_lo))
            pts = bset.points[cube.member_nodes]
            center_pt = bset.points[cube.center]
            spread = float(np.max(np.linalg.norm(pts - center_pt, axis=1))) if len(pts) > 1 else 0.0
            extent = float(np.max(cube.bbox_hi - cube.bbox_lo))
            # geometric extent is unresolvable below the node spacing, so a
            # near-singleton cube is measured at the sampling scale
            diam_lb = max(spread, extent, bset.node_spacing())
            ratios = [diam_ub / scale, cube.measure / scale ** bset.n,
                      scale / diam_lb, scale ** bset.n / cube.measure]
            worst_c1 = max(worst_c1, max(ratios))
    size_ok = size_ok and worst_c1 <= cons.c1
    size_bounds = PropertyCheck(size_ok, {"c1_measured": worst_c1,
                                          "c1_declared": cons.c1})

    # (5) the surface ball around each center stays inside its cube
    alpha_measured = math.inf
    ball_ok = True
    for li, cubes in enumerate(grid.levels):
        assign = grid.node_cube[li]
        for cube in cubes:
            scale = cube.length
            center_pt = bset.points[cube.center]
            foreign = np.flatnonzero(assign != cube.index)
            if len(foreign) == 0:
                continue
            probe = max(2.0 * cons.c1 * scale, 2.0 * bset.node_spacing())
            cand = bset.tree.query_ball_point(center_pt, probe)
            cand = np.array([c for c in cand if assign[c] != cube.index],
                            dtype=np.int64)
            if len(cand) == 0:
                d_foreign = probe
            else:
                d_foreign = float(np.min(np.linalg.norm(
                    bset.points[cand] - center_pt, axis=1)))
            alpha_measured = min(alpha_measured, d_foreign / scale)
            if d_foreign <= cons.alpha0 * scale:
                ball_ok = False
    surface_ball = PropertyCheck(ball_ok, {
        "alpha0_measured": alpha_measured if math.isfinite(alpha_measured) else None,
        "alpha0_declared": cons.alpha0})

    # (6) thin-boundary mass decay, fitted over sampled strip widths
    spacing = bset.node_spacing()
    tau_max = 0.9 * cons.alpha0
    taus = np.geomspace(min(tau_min, 0.5 * tau_max), tau_max, tau_samples)
    worst = np.zeros(tau_samples)
    fit_levels = []
    for li, cubes in enumerate(grid.levels):
        k = grid.k_min + li
        scale = 2.0 ** (-k)
        if tau_min * scale < 2.0 * spacing or len(cubes) < 2:
            continue
        fit_levels.append(k)
        dfor = _foreign_distances(grid, li, tau_max * scale)
        assign = grid.node_cube[li]
        measures = np.array([c.measure for c in cubes])
        for ti, tau in enumerate(taus):
            in_strip = dfor <= tau * scale
            strip_mass = np.bincount(assign[in_strip],
                                     weights=bset.weights[in_strip],
                                     minlength=len(cubes))
            worst[ti] = max(worst[ti], float(np.max(strip_mass / measures)))
    positive = worst > 0
    if positive.sum() >= 2:
        slope, intercept = np.polyfit(np.log(taus[positive]),
                                      np.log(worst[positive]), 1)
        eta_fit = float(slope)
        c2_fit = float(math.exp(intercept))
        thin_ok = eta_fit >= 0.5 * cons.eta_thin and c2_fit <= cons.c2
    else:
        # strips empty at every sampled width (separated structures)
        eta_fit, c2_fit, thin_ok = math.inf, 0.0, True
    thin_boundary = PropertyCheck(thin_ok, {
        "eta_fit": eta_fit if math.isfinite(eta_fit) else None,
        "c2_fit": c2_fit,
        "eta_declared": cons.eta_thin,
        "c2_declared": cons.c2,
        "fit_levels": fit_levels,
        "worst_ratios": dict(zip([float(t) for t in taus],
                                 [float(v) for v in worst])),
    })

    return GridReport(partition, nesting, unique_parent, size_bounds,
                      surface_ball, thin_boundary)


@dataclass
class Cutoff:
    """Partition-of-unity cutoff adapted to a cube at a finer scale."""

    parent_cube: tuple
    scale: int
    values: np.ndarray
    core_nodes: np.ndarray
    kept_subcubes: list
    discarded_subcubes: list
    bump_radius: float
    lipschitz_measured: float
    strip_measure: float


def build_cutoff(grid: DyadicGrid, bset: BoundarySet, cube_id, m: int) -> Cutoff:
    """Bump-sum cutoff equal to 1 well inside the cube, 0 outside it.

    The cube is covered by its level-m subcubes; subcubes within C1^2 2^-m
    of the complement are discarded, and the cutoff is the kept fraction of
    a partition of unity by radial bumps centered at subcube centers.
    """
    k, _ = cube_id
    if 2.0 ** (-m) > 2.0 ** (-k) / 4.0:
        raise GridError(f"cutoff scale m={m} too coarse for cube at level {k}")
    if m > grid.k_max:
        raise GridError(f"grid does not extend to cutoff level m={m}")
    cube = grid.cube(cube_id)
    sub_ids = [cid for cid in grid.descendants(cube_id) if cid[0] == m]
    subcubes = [grid.cube(cid) for cid in sub_ids]

    outside = np.setdiff1d(np.arange(bset.n_nodes), cube.member_nodes,
                           assume_unique=True)
    margin = grid.constants.c1 ** 2 * 2.0 ** (-m)
    if len(outside) > 0:
        foreign_tree = cKDTree(bset.points[outside])
        kept, discarded = [], []
        for cid, sub in zip(sub_ids, subcubes):
            d, _ = foreign_tree.query(bset.points[sub.member_nodes])
            if float(np.min(d)) <= margin:
                discarded.append(cid)
            else:
                kept.append(cid)
    else:
        kept, discarded = list(sub_ids), []
    if not kept:
        raise GridError(
            f"degenerate cutoff: no level-{m} subcube of {cube_id} clears "
            f"the discard margin {margin:.3g}")

    cover = 0.0
    for sub in subcubes:
        pts = bset.points[sub.member_nodes]
        cover = max(cover, float(np.max(np.linalg.norm(
            pts - bset.points[sub.center], axis=1))))
    radius = max(2.0 * grid.constants.alpha0 * 2.0 ** (-m), 1.05 * cover)

    def bump_sum(ids):
        total = np.zeros(bset.n_nodes)
        for cid in ids:
            center_pt = bset.points[grid.cube(cid).center]
            d = np.linalg.norm(bset.points - center_pt, axis=1)
            total += np.maximum(0.0, 1.0 - d / radius)
        return total

    num = bump_sum(kept)
    den = num + bump_sum(discarded)
    values = np.zeros(bset.n_nodes)
    covered = den > 0
    values[covered] = num[covered] / den[covered]
    inside = np.zeros(bset.n_nodes, dtype=bool)
    inside[cube.member_nodes] = True
    values[~inside] = 0.0

    core = cube.member_nodes[values[cube.member_nodes] >= 1.0]
    strip_measure = float(cube.measure - bset.weights[core].sum())

    pairs = bset.tree.query_pairs(2.0 * bset.node_spacing(), output_type="ndarray")
    if len(pairs) > 0:
        dv = np.abs(values[pairs[:, 0]] - values[pairs[:, 1]])
        dx = np.linalg.norm(bset.points[pairs[:, 0]] - bset.points[pairs[:, 1]],
                            axis=1)
        lipschitz = float(np.max(dv / dx))
    else:
        lipschitz = 0.0

    return Cutoff(
        parent_cube=cube_id,
        scale=m,
        values=values,
        core_nodes=core,
        kept_subcubes=kept,
        discarded_subcubes=discarded,
        bump_radius=radius,
        lipschitz_measured=lipschitz,
        strip_measure=strip_measure,
    )
