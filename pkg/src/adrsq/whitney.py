"""Whitney box decompositions of the complement, and cone regions over cubes.

Boxes live on the dyadic lattice anchored at the window's lower corner.  A
coarse tiling is refined recursively: a box is accepted once its distance to
the boundary set is at least its own diameter, giving the classical
comparable-to-distance property, and each accepted box is then subdivided
three more times.  The final boxes I satisfy

    4 diam(I) <= dist(4I, E)  and  dist(I, E) <= 40 diam(I),

and touching boxes have side ratio in [1/4, 4].  Integer corner indices make
touch and overlap tests exact.

Cone regions pair grid cubes with boxes of comparable scale: the collection
of a cube Q at aperture beta holds every box I with
ell(I)/8 <= ell(Q) <= 8 ell(I) and dist(Q, I) <= beta ell(Q).  Unions of
collections along cube chains produce the vertical regions used by the
square-function machinery.
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
from .dyadic import DyadicGrid

CONE_SCALE_SPREAD = 3  # admissible box levels are within this of the cube level


class WhitneyError(ValueError):
    pass


def _segment_box_distance_exact(p0, p1, lo, hi):
    """Distance from the segment p0-p1 to axis boxes [lo, hi], vectorized.

    Golden-section refinement of the parameter; the clamp distance is convex
    along the segment so this converges to the minimizer.
    """
    d = p1 - p0

    def at(t):
        pts = p0 + t[:, None] * d
        gap = np.maximum(np.maximum(lo - pts, pts - hi), 0.0)
        return np.linalg.norm(gap, axis=1)

    m = lo.shape[0]
    a = np.zeros(m)
    b = np.ones(m)
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    for _ in range(70):
        c = b - phi * (b - a)
        e = a + phi * (b - a)
        lower = at(c) < at(e)
        b = np.where(lower, e, b)
        a = np.where(lower, a, c)
    return at((a + b) / 2.0)


def _boxes_to_set_distance(bset: BoundarySet, corners: np.ndarray,
                           sides: np.ndarray) -> np.ndarray:
    """Exact distance from each closed box to the boundary set."""
    corners = np.asarray(corners, dtype=float)
    sides = np.broadcast_to(np.asarray(sides, dtype=float), corners.shape[:1])
    los = corners
    his = corners + sides[:, None]
    if bset.kind == SEGMENT:
        length = bset.params["length"]
        gx = np.maximum(np.maximum(los[:, 0] - length, -his[:, 0]), 0.0)
        gy = np.maximum(np.maximum(los[:, 1], -his[:, 1]), 0.0)
        return np.hypot(gx, gy)
    if bset.kind == CIRCLE:
        radius = bset.params["radius"]
        near = np.maximum(np.maximum(los, -his), 0.0)
        d_near = np.linalg.norm(near, axis=1)
        far = np.maximum(np.abs(los), np.abs(his))
        d_far = np.linalg.norm(far, axis=1)
        out = np.zeros(len(corners))
        outside = d_near >= radius
        inside = d_far <= radius
        out[outside] = d_near[outside] - radius
        out[inside] = radius - d_far[inside]
        return out
    if bset.kind == GRAPH:
        verts = np.asarray(bset.params["_vertices"], dtype=float)
        best = np.full(len(corners), np.inf)
        for i in range(len(verts) - 1):
            best = np.minimum(best, _segment_box_distance_exact(
                verts[i], verts[i + 1], los, his))
        return best
    # point-cloud kinds: exact clamp distance to the node set
    centers = corners + sides[:, None] / 2.0
    half_diag = sides * math.sqrt(bset.ambient_dim) / 2.0
    d_center, nearest = bset.tree.query(centers)
    pts_near = bset.points[nearest]
    gap = np.maximum(np.maximum(los - pts_near, pts_near - his), 0.0)
    upper = np.linalg.norm(gap, axis=1)
    out = upper.copy()
    search = bset.tree.query_ball_point(centers, upper + half_diag + 1e-12)
    for i, cand in enumerate(search):
        if len(cand) <= 1:
            continue
        pts = bset.points[cand]
        gap = np.maximum(np.maximum(los[i] - pts, pts - his[i]), 0.0)
        out[i] = min(out[i], float(np.min(np.linalg.norm(gap, axis=1))))
    return out


class WhitneyDecomposition:
    """Final Whitney boxes, stored as integer lattice corners per level."""

    def __init__(self, bset: BoundarySet, window: np.ndarray,
                 k_min: int, k_max: int,
                 level: np.ndarray, idx: np.ndarray):
        self.bset = bset
        self.window = window
        self.k_min = k_min
        self.k_max = k_max
        self.level = level
        self.idx = idx
        self.origin = window[:, 0].copy()
        order = np.lexsort(tuple(idx[:, c] for c in range(idx.shape[1] - 1, -1, -1))
                           + (level,))
        self.level = level[order]
        self.idx = idx[order]
        self.level_slices = {}
        for k in range(k_min, k_max + 1):
            lo = int(np.searchsorted(self.level, k))
            hi = int(np.searchsorted(self.level, k, side="right"))
            if hi > lo:
                self.level_slices[k] = slice(lo, hi)
        self.box_dist = _boxes_to_set_distance(
            bset, self.corners(), self.sides())
        self._center_trees = {}

    @property
    def n_boxes(self) -> int:
        return len(self.level)

    @property
    def dim(self) -> int:
        return self.idx.shape[1]

    def sides(self, sel=slice(None)) -> np.ndarray:
        return 2.0 ** (-self.level[sel].astype(float))

    def corners(self, sel=slice(None)) -> np.ndarray:
        return self.origin + self.idx[sel] * self.sides(sel)[:, None]

    def centers(self, sel=slice(None)) -> np.ndarray:
        return self.corners(sel) + self.sides(sel)[:, None] / 2.0

    def volumes(self, sel=slice(None)) -> np.ndarray:
        return self.sides(sel) ** self.dim

    def diams(self, sel=slice(None)) -> np.ndarray:
        return self.sides(sel) * math.sqrt(self.dim)

    def boxes_at(self, k: int) -> np.ndarray:
        sl = self.level_slices.get(k)
        if sl is None:
            return np.empty(0, dtype=np.int64)
        return np.arange(sl.start, sl.stop, dtype=np.int64)

    @property
    def floor_scale(self) -> float:
        return float(np.min(self.box_dist)) if self.n_boxes else math.inf

    def sample_points(self, refine: int = 1):
        """Quadrature nodes per box: refine^d subcell centers.

        Returns (points, box_of_point) with points shape (n_boxes*refine^d, d).
        """
        d = self.dim
        grids = np.meshgrid(*[np.arange(refine)] * d, indexing="ij")
        offs = (np.stack([g.ravel() for g in grids], axis=1) + 0.5) / refine
        corners = self.corners()
        sides = self.sides()
        pts = corners[:, None, :] + offs[None, :, :] * sides[:, None, None]
        box_of = np.repeat(np.arange(self.n_boxes), refine ** d)
        return pts.reshape(-1, d), box_of

    def center_tree(self, k: int) -> cKDTree | None:
        if k not in self.level_slices:
            return None
        if k not in self._center_trees:
            self._center_trees[k] = cKDTree(self.centers(self.level_slices[k]))
        return self._center_trees[k]

    def to_json(self) -> str:
        payload = {
            "window": self.window.tolist(),
            "k_min": self.k_min,
            "k_max": self.k_max,
            "level": self.level.tolist(),
            "idx": self.idx.tolist(),
        }
        return json.dumps(payload, sort_keys=True)


def save_whitney(whit: WhitneyDecomposition, path) -> None:
    Path(path).write_text(whit.to_json())


def _child_indices(idx: np.ndarray, splits: int = 1) -> np.ndarray:
    """All 2^(d*splits) dyadic children of each integer corner index."""
    d = idx.shape[1]
    factor = 1 << splits
    grids = np.meshgrid(*[np.arange(factor)] * d, indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=1)
    out = idx[:, None, :] * factor + offs[None, :, :]
    return out.reshape(-1, d)


def build_whitney(bset: BoundarySet, window, k_min: int, k_max: int
                  ) -> WhitneyDecomposition:
    """Decompose the window portion of the complement into Whitney boxes.

    k_min..k_max are the final box side exponents; acceptance runs at sides
    8x larger and each accepted box is subdivided three times.
    """
    window = np.asarray(window, dtype=float)
    d = bset.ambient_dim
    if window.shape != (d, 2):
        raise WhitneyError(f"window must be shape ({d}, 2), got {window.shape}")
    if np.any(window[:, 1] <= window[:, 0]):
        raise WhitneyError("window has empty extent")
    if k_min > k_max:
        raise WhitneyError(f"k_min={k_min} exceeds k_max={k_max}")
    err = bset.delta_error_bound()
    if err > 0 and 2.0 ** (-k_max) < 8.0 * err:
        raise WhitneyError(
            f"floor scale 2^-{k_max} below 8 x distance-field error {err:.3g}")

    origin = window[:, 0]
    p0 = k_min - 3
    side0 = 2.0 ** (-p0)
    counts = np.maximum(np.ceil((window[:, 1] - window[:, 0]) / side0), 1)
    grids = np.meshgrid(*[np.arange(int(c)) for c in counts], indexing="ij")
    active = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)

    accepted_level = []
    accepted_idx = []
    for p in range(p0, k_max - 3 + 1):
        if len(active) == 0:
            break
        side = 2.0 ** (-p)
        corners = origin + active * side
        dist = _boxes_to_set_distance(bset, corners, side)
        ok = dist >= side * math.sqrt(d)
        if np.any(ok):
            children = _child_indices(active[ok], splits=3)
            accepted_level.append(np.full(len(children), p + 3, dtype=np.int64))
            accepted_idx.append(children)
        active = _child_indices(active[~ok], splits=1) if p < k_max - 3 else active[:0]

    if not accepted_level:
        raise WhitneyError("no box accepted: window too tight around the set")
    level = np.concatenate(accepted_level)
    idx = np.concatenate(accepted_idx)
    return WhitneyDecomposition(bset, window, k_min, k_max, level, idx)


@dataclass
class WhitneyReport:
    n_boxes: int
    per_level: dict
    floor_scale: float
    band_violations: int
    touch_violations: int
    n_touch_pairs: int
    dist_over_diam_min: float
    dist_over_diam_max: float

    @property
    def all_passed(self) -> bool:
        return self.band_violations == 0 and self.touch_violations == 0

    def as_dict(self) -> dict:
        return {
            "n_boxes": self.n_boxes,
            "per_level": {str(k): v for k, v in self.per_level.items()},
            "floor_scale": self.floor_scale,
            "band_violations": self.band_violations,
            "touch_violations": self.touch_violations,
            "n_touch_pairs": self.n_touch_pairs,
            "dist_over_diam_min": self.dist_over_diam_min,
            "dist_over_diam_max": self.dist_over_diam_max,
            "all_passed": self.all_passed,
        }


def verify_whitney(whit: WhitneyDecomposition) -> WhitneyReport:
    """Check the distance band and the touching side-ratio bound on every box."""
    diam = whit.diams()
    dist = whit.box_dist
    sides = whit.sides()
    band_bad = int(np.sum(dist > 40.0 * diam))
    corners4 = whit.corners() - 1.5 * sides[:, None]
    dist4 = _boxes_to_set_distance(whit.bset, corners4, 4.0 * sides)
    band_bad += int(np.sum(dist4 < 4.0 * diam))

    # touching pairs via integer interval tests at the finest alignment
    touch_pairs = 0
    touch_bad = 0
    levels = sorted(whit.level_slices)
    for ia, ka in enumerate(levels):
        sel_a = whit.level_slices[ka]
        lo_a = whit.idx[sel_a] << (whit.k_max - ka)
        hi_a = lo_a + (1 << (whit.k_max - ka))
        tree_a = whit.center_tree(ka)
        for kb in levels[ia:]:
            sel_b = whit.level_slices[kb]
            lo_b = whit.idx[sel_b] << (whit.k_max - kb)
            hi_b = lo_b + (1 << (whit.k_max - kb))
            reach = (2.0 ** (-ka) + 2.0 ** (-kb)) / 2.0 * math.sqrt(whit.dim)
            pairs = tree_a.query_ball_tree(whit.center_tree(kb), reach * (1 + 1e-9))
            counts = np.fromiter((len(c) for c in pairs), dtype=np.int64,
                                 count=len(pairs))
            if counts.sum() == 0:
                continue
            src = np.repeat(np.arange(len(pairs)), counts)
            dst = np.concatenate([np.asarray(c, dtype=np.int64)
                                  for c in pairs if c])
            if ka == kb:
                keep = dst > src
                src, dst = src[keep], dst[keep]
            touch = np.all(np.maximum(lo_a[src], lo_b[dst])
                           <= np.minimum(hi_a[src], hi_b[dst]), axis=1)
            n_t = int(touch.sum())
            touch_pairs += n_t
            if abs(ka - kb) > 2:
                touch_bad += n_t
    ratio = dist / diam
    return WhitneyReport(
        n_boxes=whit.n_boxes,
        per_level={k: int(whit.level_slices[k].stop - whit.level_slices[k].start)
                   for k in levels},
        floor_scale=whit.floor_scale,
        band_violations=band_bad,
        touch_violations=touch_bad,
        n_touch_pairs=touch_pairs,
        dist_over_diam_min=float(ratio.min()),
        dist_over_diam_max=float(ratio.max()),
    )


def _cube_box_distances(whit: WhitneyDecomposition, pts: np.ndarray,
                        box_sel: np.ndarray) -> np.ndarray:
    """min over cube member points of the clamp distance to each box."""
    los = whit.corners()[box_sel]
    his = los + whit.sides(box_sel)[:, None]
    best = np.full(len(box_sel), np.inf)
    chunk = max(1, int(2e6 // max(len(pts), 1)))
    for s in range(0, len(box_sel), chunk):
        e = min(s + chunk, len(box_sel))
        gap = np.maximum(np.maximum(los[s:e, None, :] - pts[None, :, :],
                                    pts[None, :, :] - his[s:e, None, :]), 0.0)
        best[s:e] = np.min(np.linalg.norm(gap, axis=2), axis=1)
    return best


def collection_CQ(whit: WhitneyDecomposition, grid: DyadicGrid, cube_id,
                  beta: float) -> np.ndarray:
    """Box ids of comparable scale within distance beta * ell(Q) of the cube."""
    cube = grid.cube(cube_id)
    ell = cube.length
    pts = grid.bset.points[cube.member_nodes]
    center = grid.bset.points[cube.center]
    spread = float(np.max(np.linalg.norm(pts - center, axis=1))) if len(pts) > 1 else 0.0
    out = []
    for k in range(cube.level - CONE_SCALE_SPREAD, cube.level + CONE_SCALE_SPREAD + 1):
        tree = whit.center_tree(k)
        if tree is None:
            continue
        half_diag = 2.0 ** (-k) * math.sqrt(whit.dim) / 2.0
        reach = beta * ell + spread + half_diag + 1e-12
        cand = np.asarray(tree.query_ball_point(center, reach), dtype=np.int64)
        if len(cand) == 0:
            continue
        ids = whit.boxes_at(k)[cand]
        dist = _cube_box_distances(whit, pts, ids)
        out.append(ids[dist <= beta * ell])
    if not out:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(out))


def beta_star(whit: WhitneyDecomposition, grid: DyadicGrid) -> float:
    """Smallest power-of-2 aperture giving every cube a nonempty collection.

    Cubes with no Whitney box at any admissible scale are skipped; they can
    occur when the window caps the box sizes below the cube's scale band.
    """
    need = 1.0
    for cube in grid.all_cubes():
        pts = grid.bset.points[cube.member_nodes]
        center = grid.bset.points[cube.center]
        spread = float(np.max(np.linalg.norm(pts - center, axis=1))) if len(pts) > 1 else 0.0
        best = math.inf
        for k in range(cube.level - CONE_SCALE_SPREAD,
                       cube.level + CONE_SCALE_SPREAD + 1):
            tree = whit.center_tree(k)
            if tree is None:
                continue
            d_c, _ = tree.query(center)
            half_diag = 2.0 ** (-k) * math.sqrt(whit.dim) / 2.0
            reach = float(d_c) + spread + half_diag + 1e-12
            cand = np.asarray(tree.query_ball_point(center, reach), dtype=np.int64)
            if len(cand) == 0:
                continue
            ids = whit.boxes_at(k)[cand]
            best = min(best, float(np.min(_cube_box_distances(whit, pts, ids))))
        if math.isfinite(best):
            need = max(need, best / cube.length)
    return float(2.0 ** math.ceil(math.log2(need))) if need > 1.0 else 1.0


class ConeIndex:
    """Per-cube box collections at a fixed aperture, built on demand."""

    def __init__(self, whit: WhitneyDecomposition, grid: DyadicGrid,
                 beta: float | None = None):
        self.whit = whit
        self.grid = grid
        self.beta = beta if beta is not None else beta_star(whit, grid)
        self._cache = {}

    def boxes(self, cube_id) -> np.ndarray:
        if cube_id not in self._cache:
            self._cache[cube_id] = collection_CQ(
                self.whit, self.grid, cube_id, self.beta)
        return self._cache[cube_id]

    def build_all(self):
        for cube in self.grid.all_cubes():
            self.boxes(cube.cube_id)
        return self


@dataclass
class ConeRegion:
    """Union of box collections along a chain of cubes (deduplicated)."""

    kind: str
    box_ids: np.ndarray
    cube_ids: list
    params: dict = field(default_factory=dict)


CONE_KINDS = ("gamma", "gamma_Q", "gamma_eps", "gamma_good", "T_Q")


def cone(whit: WhitneyDecomposition, grid: DyadicGrid, x: int, spec: dict,
         cone_index: ConeIndex | None = None) -> ConeRegion:
    """Cone region over node x (or over a whole cube for kind T_Q).

    spec keys: kind (required); Q for the rooted kinds; eps for gamma_eps;
    F (stopping family cube ids) for gamma_good; beta to override the
    aperture when no cone_index is supplied.
    """
    kind = spec.get("kind")
    if kind not in CONE_KINDS:
        raise WhitneyError(f"unknown cone kind {kind!r}")
    if cone_index is None:
        cone_index = ConeIndex(whit, grid, beta=spec.get("beta"))
    if kind == "T_Q":
        if "Q" not in spec:
            raise WhitneyError("cone kind T_Q requires Q")
        cubes = grid.descendants(spec["Q"])
    else:
        cubes = grid.chain(x)
        if kind != "gamma":
            if "Q" not in spec:
                raise WhitneyError(f"cone kind {kind} requires Q")
            q_id = spec["Q"]
            cubes = [c for c in cubes if grid.is_descendant(c, q_id)]
        if kind == "gamma_eps" and "eps" not in spec:
            raise WhitneyError("cone kind gamma_eps requires eps")
        if kind in ("gamma_eps", "gamma_good") and spec.get("eps") is not None:
            eps = spec["eps"]
            cubes = [c for c in cubes if eps < 2.0 ** (-c[0]) < 1.0 / eps]
        if kind == "gamma_good":
            family = set(map(tuple, spec.get("F", [])))
            cubes = [c for c in cubes
                     if not any(grid.is_descendant(c, f) for f in family)]
    if cubes:
        parts = [cone_index.boxes(c) for c in cubes]
        box_ids = np.unique(np.concatenate(parts)) if parts else np.empty(0, np.int64)
    else:
        box_ids = np.empty(0, dtype=np.int64)
    return ConeRegion(kind=kind, box_ids=box_ids, cube_ids=cubes,
                      params={k: v for k, v in spec.items() if k != "kind"})
