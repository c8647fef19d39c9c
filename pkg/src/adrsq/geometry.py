"""Discretized Ahlfors-David regular boundary sets.

A boundary set is a weighted node cloud sampling an n-dimensional set E
embedded in R^{n+1}, plus enough closed-form geometry that distances to E
and surface measures of balls can be computed with a known error bound.
Five families are built in:

    segment_line        truncated line segment in R^2        (n = 1)
    lipschitz_graph     truncated zigzag graph in R^2        (n = 1)
    circle              circle in R^2                        (n = 1)
    sphere              sphere in R^3                        (n = 2)
    cantor_four_corner  four-corner Cantor set in R^2        (n = 1)

The node weights discretize the surface measure sigma; sums of weights
over index sets play the role of sigma throughout the package.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

SEGMENT = "segment_line"
GRAPH = "lipschitz_graph"
CIRCLE = "circle"
SPHERE = "sphere"
CANTOR = "cantor_four_corner"

KINDS = (SEGMENT, GRAPH, CIRCLE, SPHERE, CANTOR)

# Kinds whose underlying set is unbounded; the node cloud samples a window.
UNBOUNDED_KINDS = (SEGMENT, GRAPH)

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


class GeometryError(ValueError):
    pass


_CTOR_PARAMS = {
    SEGMENT: ("length",),
    GRAPH: ("length", "lipschitz", "teeth"),
    CIRCLE: ("radius",),
    SPHERE: ("radius",),
    CANTOR: (),
}


@dataclass(frozen=True)
class SurfaceBall:
    """Ball B(x, r) with center on the set, identified by node id."""

    center: int
    radius: float


@dataclass
class BoundarySet:
    """Weighted node cloud for one boundary model.

    points      (N, n+1) node coordinates
    weights     (N,) quadrature weights, sum approximates total measure
    n           dimension of the set (ambient dimension is n + 1)
    adr_constant declared regularity constant C in C^-1 r^n <= sigma(B) <= C r^n
    diameter    diameter of the underlying set (window diameter if unbounded)
    unbounded   True when the model truncates an unbounded set
    """

    kind: str
    n: int
    points: np.ndarray
    weights: np.ndarray
    params: dict
    adr_constant: float
    diameter: float
    unbounded: bool = False
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)
    _spacing: float | None = field(default=None, repr=False, compare=False)

    @property
    def ambient_dim(self) -> int:
        return self.n + 1

    @property
    def n_nodes(self) -> int:
        return len(self.weights)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def total_measure(self) -> float:
        return float(np.sum(self.weights))

    def node_spacing(self) -> float:
        """Covering scale of the cloud: max nearest-neighbor distance."""
        if self._spacing is None:
            d, _ = self.tree.query(self.points, k=2)
            self._spacing = float(np.max(d[:, 1]))
        return self._spacing

    def delta_error_bound(self) -> float:
        """Worst-case error of delta(); zero for closed-form kinds."""
        if self.kind == CANTOR:
            return 0.5 * math.sqrt(2.0) * 4.0 ** (-self.params["depth"])
        return 0.0

    def delta(self, X) -> np.ndarray | float:
        """Distance from ambient point(s) X to the set."""
        pts = np.atleast_2d(np.asarray(X, dtype=float))
        if pts.shape[1] != self.ambient_dim:
            raise GeometryError(
                f"expected points in R^{self.ambient_dim}, got shape {pts.shape}"
            )
        out = self._delta_impl(pts)
        if np.ndim(X) == 1:
            return float(out[0])
        return out

    def _delta_impl(self, pts: np.ndarray) -> np.ndarray:
        if self.kind == SEGMENT:
            lo, hi = self.params["x_lo"], self.params["x_hi"]
            dx = np.maximum(np.maximum(lo - pts[:, 0], pts[:, 0] - hi), 0.0)
            return np.hypot(dx, pts[:, 1])
        if self.kind == CIRCLE:
            r = self.params["radius"]
            return np.abs(np.hypot(pts[:, 0], pts[:, 1]) - r)
        if self.kind == SPHERE:
            r = self.params["radius"]
            return np.abs(np.linalg.norm(pts, axis=1) - r)
        if self.kind == GRAPH:
            return _polyline_distance(pts, self.params["_vertices"])
        # Sampled kind: nearest node, biased high by at most half a cell diagonal.
        d, _ = self.tree.query(pts)
        return d

    def box_distance_bounds(self, corner: np.ndarray, side: float):
        """Rigorous (lo, hi) bounds on dist(box, E) for an axis-aligned box."""
        lo_c = np.asarray(corner, dtype=float)
        hi_c = lo_c + side
        if self.kind == SEGMENT:
            seg_lo = np.array([self.params["x_lo"], 0.0])
            seg_hi = np.array([self.params["x_hi"], 0.0])
            gap = np.maximum(np.maximum(seg_lo - hi_c, lo_c - seg_hi), 0.0)
            d = float(np.linalg.norm(gap))
            return d, d
        if self.kind in (CIRCLE, SPHERE):
            r = self.params["radius"]
            near = np.linalg.norm(np.maximum(np.maximum(lo_c, -hi_c), 0.0))
            corners = _box_corners(lo_c, hi_c)
            far = float(np.max(np.linalg.norm(corners, axis=1)))
            if near <= r <= far:
                d = 0.0
            elif near > r:
                d = float(near - r)
            else:
                d = float(r - far)
            return d, d
        if self.kind == GRAPH:
            d = _polyline_box_distance(self.params["_vertices"], lo_c, hi_c)
            return d, d
        # Node-cloud bound: true distance within delta_error_bound below the
        # node-to-box distance.
        center = 0.5 * (lo_c + hi_c)
        half = 0.5 * side
        d_center, _ = self.tree.query(center)
        # nodes within d_center of the box are within d_center + box radius of center
        cand = self.tree.query_ball_point(center, d_center + half * math.sqrt(len(lo_c)) + 1e-12)
        pts = self.points[cand]
        clamped = np.clip(pts, lo_c, hi_c)
        d = float(np.min(np.linalg.norm(pts - clamped, axis=1)))
        return max(d - self.delta_error_bound(), 0.0), d

    def axis_window(self):
        """Parameter window (lo, hi) along the first axis for truncated kinds."""
        if not self.unbounded:
            return None
        return self.params["x_lo"], self.params["x_hi"]

    def to_json(self) -> str:
        nodes = [[list(map(float, p)), float(w)] for p, w in zip(self.points, self.weights)]
        payload = {
            "kind": self.kind,
            "n": self.n,
            "params": {k: v for k, v in self.params.items() if not k.startswith("_")},
            "nodes": nodes,
        }
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "BoundarySet":
        payload = json.loads(text)
        kind = payload["kind"]
        params = payload["params"]
        ctor_keys = _CTOR_PARAMS[kind]
        bset = make_boundary_set(kind, params["resolution"], **{
            k: params[k] for k in ctor_keys if k in params
        })
        nodes = payload["nodes"]
        pts = np.array([c for c, _ in nodes], dtype=float)
        w = np.array([wt for _, wt in nodes], dtype=float)
        if pts.shape != bset.points.shape or not np.allclose(pts, bset.points):
            bset.points = pts
            bset.weights = w
            bset._tree = None
            bset._spacing = None
        return bset


def _box_corners(lo, hi):
    d = len(lo)
    out = np.empty((2 ** d, d))
    for i in range(2 ** d):
        for a in range(d):
            out[i, a] = hi[a] if (i >> a) & 1 else lo[a]
    return out


def _polyline_distance(pts, vertices):
    best = np.full(len(pts), np.inf)
    for a, b in zip(vertices[:-1], vertices[1:]):
        ab = b - a
        t = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
        proj = a + t[:, None] * ab
        best = np.minimum(best, np.linalg.norm(pts - proj, axis=1))
    return best


def _polyline_box_distance(vertices, lo_c, hi_c):
    """Exact distance between a polyline and an axis-aligned box (2D)."""
    best = math.inf
    for a, b in zip(vertices[:-1], vertices[1:]):
        best = min(best, _segment_box_distance(a, b, lo_c, hi_c))
        if best == 0.0:
            return 0.0
    return best


def _segment_box_distance(a, b, lo_c, hi_c):
    # distance from segment [a, b] to box, via dense parameter sampling with
    # exact point-box distances; the segment-box distance function is convex
    # in the parameter so a fine grid plus local refinement is exact enough
    # for construction tolerances (the built-in graphs are unions of straight
    # teeth, each much longer than any box side used against them).
    t = np.linspace(0.0, 1.0, 65)
    p = a[None, :] + t[:, None] * (b - a)[None, :]
    clamped = np.clip(p, lo_c, hi_c)
    d = np.linalg.norm(p - clamped, axis=1)
    i = int(np.argmin(d))
    lo_t, hi_t = max(i - 1, 0), min(i + 1, 64)
    for _ in range(40):
        tm = np.linspace(t[lo_t], t[hi_t], 5)
        pm = a[None, :] + tm[:, None] * (b - a)[None, :]
        dm = np.linalg.norm(pm - np.clip(pm, lo_c, hi_c), axis=1)
        j = int(np.argmin(dm))
        lo_t, hi_t = 0, 4
        t = tm
        if t[-1] - t[0] < 1e-14:
            break
        lo_t, hi_t = max(j - 1, 0), min(j + 1, 4)
    return float(np.min(np.linalg.norm(
        (a[None, :] + t[:, None] * (b - a)[None, :])
        - np.clip(a[None, :] + t[:, None] * (b - a)[None, :], lo_c, hi_c), axis=1)))


def make_boundary_set(kind: str, resolution: int, **params) -> BoundarySet:
    """Build one of the five boundary models at the given resolution.

    resolution means node count for the curve kinds, approximate node count
    for the sphere, and construction depth for the Cantor set.
    """
    if kind not in KINDS:
        raise GeometryError(f"unknown boundary kind {kind!r}")
    if resolution < 2:
        raise GeometryError("resolution must be at least 2")
    if kind == SEGMENT:
        return _make_segment(resolution, **params)
    if kind == GRAPH:
        return _make_graph(resolution, **params)
    if kind == CIRCLE:
        return _make_circle(resolution, **params)
    if kind == SPHERE:
        return _make_sphere(resolution, **params)
    return _make_cantor(resolution, **params)


def _make_segment(resolution, length=1.0):
    if length <= 0:
        raise GeometryError("segment length must be positive")
    h = length / resolution
    x = (np.arange(resolution) + 0.5) * h
    pts = np.column_stack([x, np.zeros(resolution)])
    w = np.full(resolution, h)
    params = {"resolution": resolution, "length": length, "x_lo": 0.0, "x_hi": length}
    return BoundarySet(SEGMENT, 1, pts, w, params, adr_constant=2.5,
                       diameter=length, unbounded=True)


def _make_graph(resolution, length=1.0, lipschitz=0.5, teeth=4):
    if lipschitz < 0:
        raise GeometryError("lipschitz constant must be nonnegative")
    if teeth < 1:
        raise GeometryError("need at least one tooth")
    half = length / (2 * teeth)
    xs = np.linspace(0.0, length, 2 * teeth + 1)
    ys = np.where(np.arange(2 * teeth + 1) % 2 == 1, lipschitz * half, 0.0)
    vertices = np.column_stack([xs, ys])
    stretch = math.sqrt(1.0 + lipschitz ** 2)
    h = length / resolution
    xq = (np.arange(resolution) + 0.5) * h
    # piecewise-linear height of the zigzag
    frac = (xq / (2 * half)) % 1.0
    yq = lipschitz * (2 * half) * np.minimum(frac, 1.0 - frac)
    pts = np.column_stack([xq, yq])
    w = np.full(resolution, h * stretch)
    height = lipschitz * half
    params = {"resolution": resolution, "length": length, "lipschitz": lipschitz,
              "teeth": teeth, "x_lo": 0.0, "x_hi": length, "_vertices": vertices}
    return BoundarySet(GRAPH, 1, pts, w, params,
                       adr_constant=2.5 * stretch,
                       diameter=math.hypot(length, height), unbounded=True)


def _make_circle(resolution, radius=1.0):
    if radius <= 0:
        raise GeometryError("circle radius must be positive")
    theta = (np.arange(resolution) + 0.5) * (2 * math.pi / resolution)
    pts = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    w = np.full(resolution, 2 * math.pi * radius / resolution)
    params = {"resolution": resolution, "radius": radius}
    return BoundarySet(CIRCLE, 1, pts, w, params, adr_constant=2.5,
                       diameter=2 * radius)


def _make_sphere(resolution, radius=1.0):
    if radius <= 0:
        raise GeometryError("sphere radius must be positive")
    i = np.arange(resolution)
    z = 1.0 - 2.0 * (i + 0.5) / resolution
    rho = np.sqrt(np.maximum(1.0 - z ** 2, 0.0))
    phi = i * _GOLDEN_ANGLE
    pts = radius * np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    w = np.full(resolution, 4 * math.pi * radius ** 2 / resolution)
    params = {"resolution": resolution, "radius": radius}
    return BoundarySet(SPHERE, 2, pts, w, params, adr_constant=4.5,
                       diameter=2 * radius)


def _make_cantor(depth, **_ignored):
    # Four corner cells of relative side 1/4, iterated `depth` times inside
    # the unit square. Node = deepest cell center, weight = 4^-depth so the
    # natural measure has total mass one.
    offsets = np.array([[0.0, 0.0], [0.75, 0.0], [0.0, 0.75], [0.75, 0.75]])
    corners = np.zeros((1, 2))
    scale = 1.0
    for _ in range(depth):
        scale /= 4.0
        corners = (corners[:, None, :] + offsets[None, :, :] * (4.0 * scale)).reshape(-1, 2)
    pts = corners + 0.5 * scale
    w = np.full(len(pts), 4.0 ** (-depth))
    params = {"resolution": depth, "depth": depth}
    return BoundarySet(CANTOR, 1, pts, w, params, adr_constant=8.0,
                       diameter=math.sqrt(2.0))


def sigma_ball(bset: BoundarySet, ball: SurfaceBall) -> float:
    """Measure of the surface ball: sum of node weights within the radius."""
    if ball.radius <= 0:
        raise GeometryError("ball radius must be positive")
    if not (0 <= ball.center < bset.n_nodes):
        raise GeometryError("ball center must be a node id")
    idx = bset.tree.query_ball_point(bset.points[ball.center], ball.radius)
    return float(np.sum(bset.weights[idx]))


@dataclass
class AdrReport:
    c_lower: float
    c_upper: float
    passed: bool
    n_samples: int
    r_min: float
    r_max: float


def verify_adr(bset: BoundarySet, sample_count: int = 200, seed: int = 0,
               r_min_factor: float = 8.0) -> AdrReport:
    """Sample sigma(B(x, r)) / r^n and report the tightest two-sided constants.

    Radii are drawn log-uniformly above r_min_factor times the node spacing,
    so quantization skews the ratios by at most about 1 / r_min_factor. For
    truncated unbounded kinds the centers keep a margin of r from the window
    edge, since the model stands in for the full set there.
    """
    if bset.n_nodes < 2:
        raise GeometryError("need at least two nodes to verify regularity")
    rng = np.random.default_rng(seed)
    spacing = bset.node_spacing()
    r_lo = r_min_factor * spacing
    r_hi = bset.diameter / 2.0
    if r_lo >= r_hi:
        raise GeometryError("resolution too coarse for regularity sampling")
    window = bset.axis_window()
    ratios = []
    radii = np.exp(rng.uniform(math.log(r_lo), math.log(r_hi), size=sample_count))
    for r in radii:
        if window is not None:
            margin_ok = np.flatnonzero(
                (bset.points[:, 0] - window[0] >= r) & (window[1] - bset.points[:, 0] >= r)
            )
            if len(margin_ok) == 0:
                continue
            center = int(rng.choice(margin_ok))
        else:
            center = int(rng.integers(bset.n_nodes))
        sig = sigma_ball(bset, SurfaceBall(center, float(r)))
        ratios.append(sig / r ** bset.n)
    ratios = np.array(ratios)
    c_lower = float(np.min(ratios))
    c_upper = float(np.max(ratios))
    passed = max(c_upper, 1.0 / c_lower) <= bset.adr_constant
    return AdrReport(c_lower, c_upper, passed, len(ratios), float(np.min(radii)),
                     float(np.max(radii)))


def save_boundary_set(bset: BoundarySet, path) -> None:
    Path(path).write_text(bset.to_json())


def load_boundary_set(path) -> BoundarySet:
    return BoundarySet.from_json(Path(path).read_text())
