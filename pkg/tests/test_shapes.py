import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from pcfusion.errors import DegenerateOutput, InvalidParameter
from pcfusion.geometry.kdtree import KdTree
from pcfusion.geometry.types import TriangleMesh
from pcfusion.shapes import (
    GT_OFFSET,
    PerturbationSpec,
    ShapeKind,
    height,
    make_bunny_mesh,
    make_metric_pair,
    make_shape_mesh,
    remove_hole,
    sample_surface,
)


def test_plane_single_segment():
    m = make_shape_mesh(ShapeKind.PLANE, 1)
    assert m.vertices.shape == (4, 3) and len(m) == 2
    assert np.all(m.vertices[:, 2] == 0)


def test_slope_endpoints():
    assert height(ShapeKind.SLOPE, np.array([0.0]), np.array([0.3]))[0] == 0.0
    assert height(ShapeKind.SLOPE, np.array([1.0]), np.array([0.3]))[0] == pytest.approx(0.5)


def test_sine_quarter_period():
    # A sin(2 pi c x) with A = 0.1, c = 2 peaks at x = 1/8
    assert height(ShapeKind.SINE_WAVE, np.array([0.125]), np.array([0.0]))[0] == pytest.approx(0.1, abs=1e-15)


def test_triangular_wave_values():
    x = np.array([0.0, 1 / 16, 1 / 8, 3 / 16])
    assert np.allclose(height(ShapeKind.TRIANGULAR_WAVE, x, 0 * x), [0.0, 0.1, 0.0, -0.1], atol=1e-15)


@pytest.mark.parametrize("kind", list(ShapeKind))
def test_mesh_normals_face_up(kind):
    m = make_shape_mesh(kind, 8)
    assert np.all(m.triangle_normals[:, 2] > 0)


def test_sample_plane_on_surface():
    pts = sample_surface(make_shape_mesh(ShapeKind.PLANE), 1000, 0).points
    assert np.all(pts[:, 2] == 0)
    assert pts[:, :2].min() >= 0 and pts[:, :2].max() <= 1


def test_sample_same_seed_identical():
    m = make_shape_mesh(ShapeKind.SINE_WAVE)
    assert np.array_equal(sample_surface(m, 300, 5).points, sample_surface(m, 300, 5).points)


def test_sample_area_proportional():
    # unit square as one triangle of area 1/4 and two covering the remaining 3/4
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 0.5, 0], [1, 1, 0], [0, 1, 0]], float)
    m = TriangleMesh(v, [[0, 1, 2], [0, 2, 3], [0, 3, 4]])
    assert np.allclose(m.areas, [0.25, 0.25, 0.5])
    pts = sample_surface(m, 100_000, 3).points
    small = int(np.sum((pts[:, 1] < 0.5 * pts[:, 0] + 1e-12)))
    big = len(pts) - small
    assert big / small == pytest.approx(3.0, rel=0.02)
    assert chisquare([small, big], [25_000, 75_000]).pvalue > 1e-3


@pytest.mark.parametrize("kind", list(ShapeKind))
def test_metric_pair_zero_spec_is_lifted_copy(kind):
    pair = make_metric_pair(kind, PerturbationSpec())
    assert np.array_equal(pair.test.points, pair.reference.points + [0, 0, GT_OFFSET])
    ref, test, gt = pair
    assert gt == 0.5


def test_metric_pair_full_subsample_degenerate():
    with pytest.raises(DegenerateOutput):
        make_metric_pair(ShapeKind.PLANE, PerturbationSpec(sampling_factor=1.0))


def test_metric_pair_huge_hole_degenerate():
    with pytest.raises(DegenerateOutput):
        make_metric_pair(ShapeKind.PLANE, PerturbationSpec(hole_radius=2.0))


def test_spec_validation():
    with pytest.raises(InvalidParameter):
        PerturbationSpec(noise_std=-1)
    with pytest.raises(InvalidParameter):
        PerturbationSpec(sampling_factor=1.5)


def test_zero_perturbation_plane_nearest_is_preimage():
    pair = make_metric_pair(ShapeKind.PLANE, PerturbationSpec())
    d, i = KdTree(pair.reference.points).knn(pair.test.points, 2)
    assert np.all(i[:, 0] == np.arange(len(i)))
    assert np.allclose(d[:, 0], 0.5, atol=1e-12)
    assert np.all(d[:, 1] > 0.5)


def test_zero_perturbation_curved_shape_has_closer_points():
    # On curved shapes another reference point can be nearer than the vertical
    # pre-image: the "no point closer than 0.5" reading only holds for the plane.
    pair = make_metric_pair(ShapeKind.SLOPE, PerturbationSpec())
    d, _ = KdTree(pair.reference.points).nearest(pair.test.points)
    assert d.min() < 0.5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.7), st.floats(0.0, 0.7))
def test_hole_count_monotone(seed, r1, r2):
    cloud = sample_surface(make_shape_mesh(ShapeKind.PLANE), 500, seed)
    lo, hi = sorted((r1, r2))
    assert len(remove_hole(cloud, hi)) <= len(remove_hole(cloud, lo))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.95), st.floats(0.0, 0.95))
def test_subsample_count_monotone(seed, f1, f2):
    lo, hi = sorted((f1, f2))
    a = make_metric_pair(ShapeKind.PLANE, PerturbationSpec(sampling_factor=lo, rng_seed=seed), 200)
    b = make_metric_pair(ShapeKind.PLANE, PerturbationSpec(sampling_factor=hi, rng_seed=seed), 200)
    assert len(b.test) <= len(a.test)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_pair_deterministic(seed):
    spec = PerturbationSpec(0.02, 0.2, 0.3, seed)
    a = make_metric_pair(ShapeKind.SINE_WAVE, spec, 300)
    b = make_metric_pair(ShapeKind.SINE_WAVE, spec, 300)
    assert np.array_equal(a.test.points, b.test.points)


def test_hole_radius_measured_from_xy_centroid():
    pair = make_metric_pair(ShapeKind.PLANE, PerturbationSpec(hole_radius=0.3))
    c = (pair.reference.points[:, :2] + 0).mean(axis=0)
    r = np.linalg.norm(pair.test.points[:, :2] - c, axis=1)
    assert r.min() >= 0.3 - 0.01


def test_bunny_closed_and_outward():
    m = make_bunny_mesh(0.004)
    # closed: every edge shared by exactly two triangles
    e = np.sort(np.concatenate([m.triangles[:, [0, 1]], m.triangles[:, [1, 2]], m.triangles[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)
    vol = np.einsum("ij,ij->i", m.corners[:, 0], np.cross(m.corners[:, 1], m.corners[:, 2])).sum() / 6
    assert vol > 0
