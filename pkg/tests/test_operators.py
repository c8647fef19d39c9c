import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adrsq import (
    KERNEL_NAMES,
    BoxSamples,
    KernelError,
    build_approx_identity,
    dyadic_average,
    dyadic_maximal,
    global_square_norm,
    make_boundary_set,
    make_kernel,
    reproduce_residual,
    square_sum_Dj,
    theta_apply,
    theta_constant,
    theta_on_boxes,
    verify_kernel,
)


# ------------------------------------------------------------------ kernels

def test_kernel_names_frozen():
    assert KERNEL_NAMES == ("constant", "disk_poisson", "envelope",
                            "poisson_derivative", "riesz_gradient")


def test_make_kernel_validation(seg_bset):
    with pytest.raises(KernelError, match="unknown kernel"):
        make_kernel("heat", seg_bset)
    circ = make_boundary_set("circle", 64, radius=1.0)
    with pytest.raises(KernelError, match="not defined on kind"):
        make_kernel("poisson_derivative", circ)
    with pytest.raises(KernelError, match="alpha"):
        make_kernel("envelope", seg_bset, alpha=0.0)
    with pytest.raises(KernelError, match="unknown kernel parameter"):
        make_kernel("envelope", seg_bset, sigma=2.0)


def test_poisson_derivative_point_value(seg_kernel):
    # t d/dt P_t(x) at t=1, x=0 is -1/pi
    v = seg_kernel.evaluate(np.array([[0.0, 1.0]]), np.array([[0.0, 0.0]]))
    assert v[0, 0] == pytest.approx(-1.0 / math.pi, abs=1e-15)


def test_theta_constant_vanishes_for_poisson(seg_bset, seg_kernel):
    # P_t * 1 = 1 for every t, so the t-derivative of the extension of the
    # constant vanishes; the node sum plus the closed-form tail must see that
    pts = np.array([[0.3, 0.2], [0.71, 0.05], [0.1, 0.5], [-0.2, 0.15]])
    assert float(np.max(np.abs(theta_constant(seg_kernel, pts)))) < 1e-4


def test_theta_constant_vanishes_for_riesz(seg_bset):
    kernel = make_kernel("riesz_gradient", seg_bset)
    pts = np.array([[0.3, 0.2], [0.71, 0.05], [0.1, 0.5]])
    assert float(np.max(np.abs(theta_constant(kernel, pts)))) < 1e-4


def test_theta_constant_vanishes_for_disk_kernel():
    circ = make_boundary_set("circle", 256, radius=1.0)
    kernel = make_kernel("disk_poisson", circ)
    # includes the exact disk center, where the radial limit is taken
    pts = np.array([[0.5, 0.1], [1.3, 0.4], [0.0, 0.0], [0.9, 0.9]])
    assert float(np.max(np.abs(theta_constant(kernel, pts)))) < 1e-10


def test_theta_constant_adds_tail_on_truncated_sets(seg_bset, seg_kernel):
    pts = np.array([[0.4, 0.3]])
    ones = np.ones(seg_bset.n_nodes)
    base = theta_apply(seg_kernel, ones, pts)
    full = theta_constant(seg_kernel, pts)
    assert full[0] == pytest.approx(
        base[0] + seg_kernel.constant_tail(pts)[0])
    assert abs(full[0]) < abs(base[0])


def test_theta_apply_refuses_on_set_points(seg_bset, seg_kernel):
    with pytest.raises(KernelError, match="singular"):
        theta_apply(seg_kernel, np.ones(seg_bset.n_nodes),
                    seg_bset.points[:3])


def test_envelope_has_no_tail(seg_bset):
    kernel = make_kernel("envelope", seg_bset)
    assert not kernel.has_tail
    with pytest.raises(KernelError, match="tail"):
        kernel.constant_tail(np.array([[0.5, 0.5]]))


VERIFY_CASES = [
    ("poisson_derivative", "segment_line", 256, {"length": 1.0}),
    ("riesz_gradient", "segment_line", 256, {"length": 1.0}),
    ("disk_poisson", "circle", 256, {"radius": 1.0}),
    ("envelope", "segment_line", 256, {"length": 1.0}),
    ("envelope", "cantor_four_corner", 4, {}),
]


@pytest.mark.parametrize("name,kind,res,params", VERIFY_CASES,
                         ids=[f"{c[0]}-{c[1]}" for c in VERIFY_CASES])
def test_verify_kernel_passes(name, kind, res, params):
    bset = make_boundary_set(kind, res, **params)
    report = verify_kernel(make_kernel(name, bset))
    assert report.all_passed
    assert report.decay_measured <= report.decay_declared * (1 + 1e-9)
    assert report.holder_measured <= report.holder_declared * (1 + 1e-9)


def test_constant_kernel_fails_decay(seg_bset):
    report = verify_kernel(make_kernel("constant", seg_bset))
    assert not report.decay_passed
    assert not report.all_passed


# -------------------------------------------------------------- box samples

def test_square_terms_small_case():
    samples = BoxSamples(
        refine=1,
        values=np.array([[2.0], [3.0]]),
        delta=np.array([[0.5], [2.0]]),
        volumes=np.array([1.0, 4.0]),
    )
    assert samples.square_terms(power=1.0).tolist() == [8.0, 18.0]
    assert samples.square_terms(power=3.0).tolist() == [32.0, 4.5]


def test_theta_on_boxes_shapes(seg_bset, seg_whit, seg_kernel):
    samples = theta_on_boxes(seg_kernel, seg_whit, refine=2)
    m = 2 ** seg_whit.dim
    assert samples.values.shape == (seg_whit.n_boxes, m)
    assert samples.delta.shape == (seg_whit.n_boxes, m)
    assert np.all(samples.delta > 0)
    assert np.array_equal(samples.volumes, seg_whit.volumes())


def test_global_square_norm_is_quadratic(seg_bset, seg_whit, seg_kernel):
    rng = np.random.default_rng(2)
    f = rng.normal(size=seg_bset.n_nodes)
    base = global_square_norm(seg_whit, seg_kernel, f)
    assert global_square_norm(seg_whit, seg_kernel, 2.0 * f) == 4.0 * base
    assert base > 0


# ------------------------------------------------------ approximate identity

@pytest.fixture(scope="module")
def seg_family(seg_grid):
    return build_approx_identity(seg_grid, seg_grid.bset)


def test_approx_identity_marginals(seg_bset, seg_family):
    ones = np.ones(seg_bset.n_nodes)
    for j in seg_family.levels:
        assert float(np.max(np.abs(seg_family.smooth(j, ones) - 1.0))) < 1e-9


def test_approx_identity_self_adjoint(seg_bset, seg_family):
    rng = np.random.default_rng(0)
    f = rng.normal(size=seg_bset.n_nodes)
    g = rng.normal(size=seg_bset.n_nodes)
    w = seg_bset.weights
    j = seg_family.levels[-1]
    lhs = float(np.sum(w * g * seg_family.smooth(j, f)))
    rhs = float(np.sum(w * f * seg_family.smooth(j, g)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_differences_telescope(seg_bset, seg_family):
    rng = np.random.default_rng(1)
    f = rng.normal(size=seg_bset.n_nodes)
    total = np.zeros(seg_bset.n_nodes)
    for j in seg_family.difference_levels:
        total += seg_family.difference(j, f)
    fine = seg_family.smooth(seg_family.levels[-1], f)
    coarse = seg_family.smooth(seg_family.levels[0], f)
    assert np.allclose(total, fine - coarse, atol=1e-12)


def test_difference_needs_coarser_level(seg_family):
    with pytest.raises(KernelError, match="no coarser scale"):
        seg_family.difference(seg_family.levels[0], np.zeros(1))


def test_square_sum_kills_constants(seg_bset, seg_family):
    assert square_sum_Dj(seg_family, np.ones(seg_bset.n_nodes)) < 1e-16
    with pytest.raises(KernelError, match="p must be positive"):
        square_sum_Dj(seg_family, np.ones(seg_bset.n_nodes), p=0.0)


def test_reproduce_residual_bounded(seg_bset, seg_family):
    rng = np.random.default_rng(4)
    f = rng.normal(size=seg_bset.n_nodes)
    res = reproduce_residual(seg_family, f)
    assert 0.0 <= res <= 1.2
    assert reproduce_residual(seg_family, np.zeros(seg_bset.n_nodes)) == 0.0


def test_approx_identity_guards(seg_grid):
    with pytest.raises(KernelError, match="positive"):
        build_approx_identity(seg_grid, seg_grid.bset, eps_smooth=0.0)
    with pytest.raises(KernelError, match="fewer than 2 neighbors"):
        build_approx_identity(seg_grid, seg_grid.bset, eps_smooth=0.1)


# --------------------------------------------------- averages and maximal

def test_dyadic_average_exact_on_constants(seg_grid):
    f = np.full(seg_grid.bset.n_nodes, 3.25)
    for cube in seg_grid.all_cubes():
        assert dyadic_average(seg_grid, f, cube.cube_id) == \
            pytest.approx(3.25, rel=1e-14)


def test_dyadic_average_is_linear(seg_grid):
    rng = np.random.default_rng(5)
    f = rng.normal(size=seg_grid.bset.n_nodes)
    g = rng.normal(size=seg_grid.bset.n_nodes)
    cid = (3, 4)
    assert dyadic_average(seg_grid, f + g, cid) == pytest.approx(
        dyadic_average(seg_grid, f, cid) + dyadic_average(seg_grid, g, cid))


@given(seed=st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_dyadic_maximal_dominates_cube_averages(seg_grid, seed):
    f = np.random.default_rng(seed).normal(size=seg_grid.bset.n_nodes)
    maximal = dyadic_maximal(seg_grid, f)
    for cube in seg_grid.all_cubes():
        mean = abs(dyadic_average(seg_grid, f, cube.cube_id))
        assert np.all(maximal[cube.member_nodes] >= mean - 1e-12)
