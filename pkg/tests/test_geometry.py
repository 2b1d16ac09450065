import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from roofplanes.cloud_io import PointCloud
from roofplanes.geometry import (
    DEFAULT_LAMBDA,
    GeometryError,
    build_index,
    canonicalize_normals,
    composite_distance,
    estimate_normals,
    fit_plane,
    normal_cosine_distance,
)

from conftest import grid_cloud


# ------------------------------------------------------------------ index


def test_single_point_knn_is_self():
    idx = build_index(PointCloud(np.array([[1.0, 2.0, 3.0]])))
    d, i = idx.knn([[1.0, 2.0, 3.0]], 1)
    assert i.tolist() == [[0]] and d[0, 0] == 0.0


def test_grid_radius_four_neighborhood():
    cloud = grid_cloud(3, 3)
    found = build_index(cloud).radius([1.0, 1.0, 0.0], 1.01)
    assert len(found) == 5
    assert set(map(tuple, cloud.points[found][:, :2].tolist())) == {
        (1, 1), (0, 1), (2, 1), (1, 0), (1, 2)}


def test_empty_cloud_index_error():
    with pytest.raises(GeometryError):
        build_index(PointCloud(np.zeros((0, 3))))


def test_knn_matches_linear_scan(rng):
    pts = rng.uniform(0, 10, size=(200, 3))
    idx = build_index(PointCloud(pts))
    q = rng.uniform(0, 10, size=(30, 3))
    d, i = idx.knn(q, 7)
    for row in range(len(q)):
        brute = np.sqrt(((pts - q[row]) ** 2).sum(axis=1))
        order = np.argsort(brute, kind="stable")[:7]
        np.testing.assert_allclose(d[row], brute[order], atol=1e-12)
        assert set(i[row]) == set(order)


def test_radius_matches_linear_scan(rng):
    pts = rng.uniform(0, 5, size=(200, 3))
    idx = build_index(PointCloud(pts))
    for c in pts[:20]:
        brute = np.flatnonzero(np.linalg.norm(pts - c, axis=1) <= 1.3)
        np.testing.assert_array_equal(idx.radius(c, 1.3), brute)


def test_knn_all_starts_with_self_even_with_duplicates():
    pts = np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    table = build_index(PointCloud(pts)).knn_all(3)
    assert table[:, 0].tolist() == [0, 1, 2, 3]


# ------------------------------------------------------------------ normals


def test_normals_on_z_plane(rng):
    xy = rng.uniform(0, 5, size=(300, 2))
    cloud = PointCloud(np.column_stack([xy, np.zeros(300)]))
    np.testing.assert_allclose(estimate_normals(cloud), np.tile([0, 0, 1.0], (300, 1)), atol=1e-9)


def test_normals_on_tilted_plane_canonical(rng):
    u = rng.uniform(0, 5, size=(300, 2))
    # plane x + z = 2 parametrized by (x, y)
    pts = np.column_stack([u[:, 0], u[:, 1], 2 - u[:, 0]])
    n = estimate_normals(PointCloud(pts))
    np.testing.assert_allclose(n, np.tile([1, 0, 1] / np.sqrt(2), (300, 1)), atol=1e-9)


def test_noisy_plane_angular_error(rng):
    true = np.array([0.2, -0.3, 1.0])
    true /= np.linalg.norm(true)
    e1 = np.cross(true, [1.0, 0, 0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(true, e1)
    uv = rng.uniform(-5, 5, size=(3000, 2))
    pts = uv[:, :1] * e1 + uv[:, 1:] * e2 + rng.normal(0, 0.01, size=(3000, 1)) * true
    n = estimate_normals(PointCloud(pts))
    interior = np.all(np.abs(uv) < 4.5, axis=1)
    ang = np.degrees(np.arccos(np.clip(np.abs(n[interior] @ true), 0, 1)))
    assert ang.max() < 5.0


def test_collinear_neighborhood_flagged_unreliable():
    pts = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    n, ok = estimate_normals(PointCloud(pts), k=4, return_reliability=True)
    assert not ok.any()
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0)


@given(st.integers(0, 2**32 - 1))
def test_normals_unit_length_property(seed):
    pts = np.random.default_rng(seed).normal(size=(40, 3))
    n = estimate_normals(PointCloud(pts), k=8)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
    assert np.all(n[:, 2] >= -1e-12)


def test_canonicalize_tie_breaks():
    n = canonicalize_normals(np.array([[0, 0, -1.0], [0, -1.0, 0], [-1.0, 0, 0], [1.0, 0, 0]]))
    np.testing.assert_array_equal(n, [[0, 0, 1], [0, 1, 0], [1, 0, 0], [1, 0, 0]])


# ------------------------------------------------------------------ plane fit


def test_fit_unit_square():
    cloud = PointCloud(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float))
    plane = fit_plane(cloud, range(4))
    np.testing.assert_allclose(plane.normal, [0, 0, 1], atol=1e-12)
    assert abs(plane.offset) < 1e-12 and plane.t_dist < 1e-12


def test_fit_lifted_square():
    cloud = PointCloud(np.array([[0, 0, 5], [1, 0, 5], [0, 1, 5], [1, 1, 5]], dtype=float))
    assert fit_plane(cloud, range(4)).offset == pytest.approx(-5.0, abs=1e-12)


def test_fit_degenerate_errors():
    line = PointCloud(np.column_stack([np.arange(5.0), np.arange(5.0), np.zeros(5)]))
    with pytest.raises(GeometryError):
        fit_plane(line, range(5))
    with pytest.raises(GeometryError):
        fit_plane(line, [0, 1])


def _seeded_noisy_plane():
    rng = np.random.default_rng(7)
    n = np.array([1.0, 2.0, 3.0])
    n /= np.linalg.norm(n)
    u = np.cross(n, [1, 0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    st_ = rng.uniform(-2, 2, (100, 2))
    return st_[:, :1] * u + st_[:, 1:] * v + 0.5 * n + rng.normal(0, 0.01, (100, 1)) * n


def test_fit_matches_frozen_svd_oracle():
    # reference values from an SVD of the centered sample (smallest singular vector)
    plane = fit_plane(PointCloud(_seeded_noisy_plane()), range(100))
    oracle = np.array([0.26706891342230565, 0.5349940693961451, 0.8015332439733123])
    angle = np.degrees(np.arccos(min(1.0, abs(plane.normal @ oracle))))
    assert angle < 1.0
    np.testing.assert_allclose(plane.normal, oracle, atol=1e-9)
    assert plane.offset == pytest.approx(-0.4989090528562921, abs=1e-9)
    assert plane.t_dist == pytest.approx(0.031085004324841282, abs=1e-9)


def test_fit_support_within_t_dist(rng):
    pts = _seeded_noisy_plane()
    n = estimate_normals(PointCloud(pts))
    plane = fit_plane(PointCloud(pts, n), range(100))
    assert np.all(plane.distance(pts) <= plane.t_dist + 1e-12)
    assert 0 <= plane.t_norm <= 1
    assert np.linalg.norm(plane.normal) == pytest.approx(1.0, abs=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_fit_residuals_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3)) * [3.0, 2.0, 0.1]
    rot = Rotation.random(random_state=seed).as_matrix()
    moved = pts @ rot.T + rng.uniform(-100, 100, 3)
    a = fit_plane(PointCloud(pts), range(30))
    b = fit_plane(PointCloud(moved), range(30))
    np.testing.assert_allclose(a.distance(pts), b.distance(moved), atol=1e-9)


# ------------------------------------------------------------------ composite distance


def test_composite_distance_default_lambda():
    assert DEFAULT_LAMBDA == 20.0
    assert composite_distance(0.1, 0.05) == pytest.approx(2.05, abs=1e-12)
    assert composite_distance(0.1, 0.05, 20) == pytest.approx(2.05, abs=1e-12)


@pytest.mark.parametrize("lam", [0.5, 1.0, 20.0, 1e3])
def test_composite_distance_zero(lam):
    assert composite_distance(0.0, 0.0, lam) == 0.0


def test_composite_distance_p2p_step():
    lam = 20.0
    base = composite_distance(0.3, 0.2, lam)
    assert composite_distance(0.31, 0.2, lam) - base == pytest.approx(0.01 * lam, abs=1e-12)


@pytest.mark.parametrize("lam", [0.0, -1.0])
def test_composite_distance_rejects_nonpositive_lambda(lam):
    with pytest.raises(GeometryError):
        composite_distance(0.1, 0.1, lam)


pos = st.floats(0, 10, allow_nan=False)


@given(pos, st.floats(0, 1), st.floats(1e-3, 10), st.floats(1e-3, 1), st.floats(1.01, 100))
def test_composite_distance_monotone_and_linear(p, n, dp, dn, lam):
    base = composite_distance(p, n, lam)
    assert base >= 0
    assert composite_distance(p + dp, n, lam) > base
    assert composite_distance(p, n + dn, lam) > base
    assert composite_distance(p + dp, n + dn, lam) == pytest.approx(
        base + composite_distance(dp, dn, lam), rel=1e-12, abs=1e-12)


def test_normal_cosine_distance_sign_insensitive():
    n = np.array([[0, 0, 1.0], [0, 0, -1.0], [1.0, 0, 0]])
    np.testing.assert_allclose(normal_cosine_distance(n, [0, 0, 1.0]), [0, 0, 1])
