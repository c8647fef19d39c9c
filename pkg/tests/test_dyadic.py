import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adrsq import (
    GridError,
    build_cutoff,
    build_grid,
    make_boundary_set,
    save_grid,
    verify_grid,
)
from adrsq.dyadic import DEFAULT_CONSTANTS


# ---------------------------------------------------------------- segment

def test_segment_cubes_are_exact_dyadic_intervals(seg_grid):
    # on the unit segment the capture construction must reproduce the
    # standard dyadic intervals: floor(x 2^k) is constant on each cube
    # and distinct across cubes of one level
    xs = seg_grid.bset.points[:, 0]
    for k in range(seg_grid.k_min, seg_grid.k_max + 1):
        labels = []
        for cube in seg_grid.cubes(k):
            cell = np.floor(xs[cube.member_nodes] * 2.0 ** k).astype(int)
            assert cell.min() == cell.max()
            labels.append(int(cell[0]))
        assert len(set(labels)) == len(labels)


def test_segment_level_counts(seg_grid):
    assert [len(seg_grid.cubes(k)) for k in range(1, 6)] == [2, 4, 8, 16, 32]


def test_segment_cube_measures_exact(seg_grid):
    for k in range(seg_grid.k_min, seg_grid.k_max + 1):
        for cube in seg_grid.cubes(k):
            assert cube.measure == pytest.approx(2.0 ** (-k))


# ----------------------------------------------------------------- circle

@pytest.fixture(scope="module")
def circle_grid():
    bset = make_boundary_set("circle", 256, radius=1.0)
    return build_grid(bset, -1, 4)


def test_circle_cube_measures_comparable_to_scale(circle_grid):
    for k in range(circle_grid.k_min, circle_grid.k_max + 1):
        for cube in circle_grid.cubes(k):
            assert 2.0 ** (-k) / 8.0 <= cube.measure <= 8.0 * 2.0 ** (-k)


def test_circle_cubes_are_contiguous_arcs(circle_grid):
    bset = circle_grid.bset
    n = bset.n_nodes
    angles = np.arctan2(bset.points[:, 1], bset.points[:, 0])
    rank = np.empty(n, dtype=int)
    rank[np.argsort(angles)] = np.arange(n)
    for cube in circle_grid.all_cubes():
        pos = np.sort(rank[cube.member_nodes])
        gaps = np.diff(pos)
        # contiguous modulo n: at most one jump, and then the block must
        # wrap (it contains both the first and the last angular rank)
        jumps = np.flatnonzero(gaps != 1)
        if len(jumps) == 0:
            continue
        assert len(jumps) == 1
        assert pos[0] == 0 and pos[-1] == n - 1


# ----------------------------------------------------------------- cantor

def _corner_digits(p, generations):
    """Digit pair per generation identifying the self-similar cell of p."""
    corner = np.zeros(2)
    side = 1.0
    digits = []
    for _ in range(generations):
        rel = p - corner
        d = (rel >= side / 2.0).astype(int)
        corner = corner + 0.75 * side * d
        side /= 4.0
        digits.append((int(d[0]), int(d[1])))
    return tuple(digits)


def test_cantor_cubes_equal_self_similar_cells():
    depth = 4
    bset = make_boundary_set("cantor_four_corner", depth)
    grid = build_grid(bset, 0, 5)
    for k in range(grid.k_min, grid.k_max + 1):
        gen = min(depth, max(0, math.ceil(k / 2)))
        cells = {}
        for i in range(bset.n_nodes):
            cells.setdefault(_corner_digits(bset.points[i], gen), []).append(i)
        want = {frozenset(v) for v in cells.values()}
        got = {frozenset(c.member_nodes.tolist()) for c in grid.cubes(k)}
        assert got == want


def test_cantor_level_counts():
    bset = make_boundary_set("cantor_four_corner", 4)
    grid = build_grid(bset, 0, 5)
    assert [len(grid.cubes(k)) for k in range(0, 6)] == [1, 4, 4, 16, 16, 64]


# --------------------------------------------------- structural invariants

VERIFY_CONFIGS = [
    ("segment_line", 256, {"length": 1.0}, 1, 5),
    ("lipschitz_graph", 512, {"length": 1.0, "lipschitz": 0.5, "teeth": 4}, 0, 4),
    ("circle", 256, {"radius": 1.0}, -1, 4),
    ("sphere", 2048, {"radius": 1.0}, 0, 2),
    ("cantor_four_corner", 4, {}, 0, 5),
]


@pytest.mark.parametrize("kind,res,params,kmin,kmax",
                         VERIFY_CONFIGS, ids=[c[0] for c in VERIFY_CONFIGS])
def test_verify_grid_all_kinds(kind, res, params, kmin, kmax):
    bset = make_boundary_set(kind, res, **params)
    grid = build_grid(bset, kmin, kmax)
    report = verify_grid(grid)
    detail = report.as_dict()
    failed = [name for name, c in detail.items()
              if isinstance(c, dict) and not c["passed"]]
    assert report.all_passed, failed


def test_partition_and_nesting_direct(seg_grid):
    n = seg_grid.bset.n_nodes
    for k in range(seg_grid.k_min, seg_grid.k_max + 1):
        counts = np.zeros(n, dtype=int)
        for cube in seg_grid.cubes(k):
            counts[cube.member_nodes] += 1
        assert np.all(counts == 1)
    for k in range(seg_grid.k_min, seg_grid.k_max):
        for cube in seg_grid.cubes(k):
            child_nodes = np.concatenate(
                [seg_grid.cube(cid).member_nodes
                 for cid in seg_grid.children_of(cube.cube_id)])
            assert np.array_equal(np.sort(child_nodes), cube.member_nodes)


# --------------------------------------------------------- tree navigation

def test_chain_locate_consistency(seg_grid):
    rng = np.random.default_rng(3)
    for x in rng.integers(0, seg_grid.bset.n_nodes, size=16):
        x = int(x)
        ids = seg_grid.chain(x)
        assert [cid[0] for cid in ids] == list(
            range(seg_grid.k_min, seg_grid.k_max + 1))
        for cid in ids:
            assert x in seg_grid.cube(cid).member_nodes
            assert seg_grid.locate(x, cid[0]) == cid
        for coarse, fine in zip(ids, ids[1:]):
            assert seg_grid.parent_of(fine) == coarse
            assert seg_grid.is_descendant(fine, coarse)
            assert not seg_grid.is_descendant(coarse, fine)
        assert seg_grid.ancestor_at(ids[-1], seg_grid.k_min) == ids[0]


def test_descendants_match_membership():
    bset = make_boundary_set("segment_line", 64, length=1.0)
    grid = build_grid(bset, 1, 4)
    for cube in grid.all_cubes():
        listed = set(grid.descendants(cube.cube_id))
        members = set(cube.member_nodes.tolist())
        brute = {c.cube_id for c in grid.all_cubes()
                 if c.level >= cube.level
                 and set(c.member_nodes.tolist()) <= members}
        assert listed == brute
        masks = grid.descendant_mask(cube.cube_id)
        flagged = {(grid.k_min + li, j)
                   for li, m in enumerate(masks) for j in np.flatnonzero(m)}
        assert flagged == brute


@given(st.integers(min_value=0, max_value=255), st.integers(min_value=1, max_value=5))
def test_locate_agrees_with_chain(seg_grid, x, k):
    assert seg_grid.locate(x, k) == seg_grid.chain(x)[k - seg_grid.k_min]


# ------------------------------------------------------------------ guards

def test_build_grid_guards():
    bset = make_boundary_set("segment_line", 64, length=1.0)
    with pytest.raises(GridError, match="k_max"):
        build_grid(bset, 1, 9)
    with pytest.raises(GridError, match="k_min"):
        build_grid(bset, -12, 4)
    with pytest.raises(GridError):
        build_grid(bset, 3, 2)


def test_navigation_guards(seg_grid):
    with pytest.raises(GridError):
        seg_grid.cubes(seg_grid.k_max + 1)
    with pytest.raises(GridError):
        seg_grid.locate(-1, seg_grid.k_min)
    with pytest.raises(GridError):
        seg_grid.locate(seg_grid.bset.n_nodes, seg_grid.k_min)
    with pytest.raises(GridError):
        seg_grid.ancestor_at((seg_grid.k_max, 0), seg_grid.k_min - 1)


# ----------------------------------------------------------- serialization

def test_build_is_deterministic():
    bset = make_boundary_set("circle", 128, radius=1.0)
    a = build_grid(bset, 0, 3).to_json()
    b = build_grid(bset, 0, 3).to_json()
    assert a == b


def test_grid_json_round_trip(tmp_path, seg_grid):
    path = tmp_path / "grid.json"
    save_grid(seg_grid, path)
    payload = json.loads(path.read_text())
    assert payload["k_min"] == seg_grid.k_min
    assert payload["k_max"] == seg_grid.k_max
    cons = DEFAULT_CONSTANTS["segment_line"]
    assert payload["constants"] == {
        "alpha0": cons.alpha0, "eta_thin": cons.eta_thin,
        "c1": cons.c1, "c2": cons.c2, "capture_mult": cons.capture_mult,
    }
    total = sum(len(seg_grid.cubes(k))
                for k in range(seg_grid.k_min, seg_grid.k_max + 1))
    assert len(payload["cubes"]) == total
    by_id = {(c["k"], c["j"]): c for c in payload["cubes"]}
    for cube in seg_grid.all_cubes():
        rec = by_id[cube.cube_id]
        assert rec["node_ids"] == cube.member_nodes.tolist()
        assert rec["measure"] == cube.measure


# ----------------------------------------------------------------- cutoffs

@pytest.fixture(scope="module")
def seg_cutoff(deep_grid):
    return build_cutoff(deep_grid, deep_grid.bset, (1, 0), 6)


def test_cutoff_range_and_support(deep_grid, seg_cutoff):
    cut = seg_cutoff
    assert np.all(cut.values >= 0.0)
    assert np.all(cut.values <= 1.0)
    cube = deep_grid.cube((1, 0))
    outside = np.setdiff1d(np.arange(deep_grid.bset.n_nodes), cube.member_nodes)
    assert np.all(cut.values[outside] == 0.0)
    assert len(cut.core_nodes) > 0
    assert np.all(cut.values[cut.core_nodes] == 1.0)


def test_cutoff_kept_subcubes_cover_core(deep_grid, seg_cutoff):
    kept_nodes = np.concatenate(
        [deep_grid.cube(cid).member_nodes for cid in seg_cutoff.kept_subcubes])
    assert np.all(np.isin(seg_cutoff.core_nodes, kept_nodes))
    level_ids = {cid for cid in deep_grid.descendants((1, 0)) if cid[0] == 6}
    assert set(seg_cutoff.kept_subcubes) | set(
        seg_cutoff.discarded_subcubes) == level_ids


def test_cutoff_lipschitz_scales_with_bump_radius(seg_cutoff):
    # the bumps have slope 1/radius, so the normalized sum cannot be much
    # steeper than that
    assert seg_cutoff.lipschitz_measured * seg_cutoff.bump_radius <= 4.0


def test_cutoff_strip_is_thin(deep_grid, seg_cutoff):
    # the strip where the cutoff dips below 1 sits within the discard
    # margin plus one bump radius of the complement, at both cube ends
    margin = deep_grid.constants.c1 ** 2 * 2.0 ** (-6)
    width = 2.0 * (margin + seg_cutoff.bump_radius
                   + deep_grid.bset.node_spacing())
    assert seg_cutoff.strip_measure <= width


def test_cutoff_guards(deep_grid):
    with pytest.raises(GridError, match="too coarse"):
        build_cutoff(deep_grid, deep_grid.bset, (1, 0), 2)
    with pytest.raises(GridError, match="extend"):
        build_cutoff(deep_grid, deep_grid.bset, (1, 0), deep_grid.k_max + 1)
