import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from roofplanes import synthetic as syn
from roofplanes.cloud_io import NOISE, PointCloud
from roofplanes.geometry import build_index, estimate_normals
from roofplanes.metrics import point_accuracy
from roofplanes.superpoints import (
    GrowthParams,
    SuperpointPartition,
    fine_cluster_count,
    kmeans_split,
    make_coarse,
    make_fine,
    partition_from_labels,
    refine_boundaries_local,
    region_grow,
    segment_coarse,
    superpoint_quality,
)


def _prepare(cloud):
    idx = build_index(cloud)
    return idx, estimate_normals(cloud, idx)


# ------------------------------------------------------------------ cluster counts


def test_cluster_count_upper_branch():
    assert fine_cluster_count(250, 100) == 3


def test_cluster_count_lower_branch():
    assert fine_cluster_count(100, 100) == 50
    assert fine_cluster_count(7, 100) == 4


def test_cluster_count_noise_rule():
    assert fine_cluster_count(400, 100, noise=True) == 8
    assert fine_cluster_count(3, 100, noise=True) == 2


def test_cluster_count_never_exceeds_size():
    assert fine_cluster_count(1, 100, noise=True) == 1
    assert fine_cluster_count(1, 100) == 1


@given(st.integers(1, 5000), st.integers(2, 500), st.booleans())
def test_cluster_count_bounds(size, n, noise):
    k = fine_cluster_count(size, n, noise)
    assert 1 <= k <= size
    if size > n and not noise:
        assert size / k <= n


# ------------------------------------------------------------------ params


@pytest.mark.parametrize("field,value", [("t_dist", 0.0), ("t_norm", 1.5), ("k_growth", 2),
                                         ("min_region", 2), ("refit_period", 0), ("min_width", -1)])
def test_growth_params_validation_names_field(field, value):
    with pytest.raises(ValueError, match=field):
        GrowthParams(**{field: value}).validate()


# ------------------------------------------------------------------ region growing


def test_single_plane_one_region(rng):
    pts = np.column_stack([rng.uniform(0, 8, (800, 2)), np.zeros(800)])
    cloud = PointCloud(pts)
    idx, nrm = _prepare(cloud)
    labels = region_grow(cloud, idx, nrm)
    assert labels.tolist() == [0] * 800


def test_noise_cube_all_noise():
    cloud = syn.noise_cube(seed=3, n_points=500)
    idx, nrm = _prepare(cloud)
    assert np.all(region_grow(cloud, idx, nrm) == NOISE)


def test_noise_free_gable_two_regions():
    r = syn.gable(seed=11, n_points=2000, slopes_deg=(30.0, 30.0))
    idx, nrm = _prepare(r.cloud)
    labels = segment_coarse(r.cloud, idx, nrm)
    assert np.unique(labels[labels != NOISE]).size == 2
    spacing = np.median(idx.knn(r.cloud.points, 2)[0][:, 1])
    ridge = syn.boundary_band(r.cloud.points, r.labels, 2 * spacing)
    assert point_accuracy(r.labels[~ridge], labels[~ridge]) >= 0.99


def test_region_grow_respects_candidate_mask(rng):
    pts = np.column_stack([rng.uniform(0, 8, (600, 2)), np.zeros(600)])
    cloud = PointCloud(pts)
    idx, nrm = _prepare(cloud)
    mask = pts[:, 0] < 4
    labels = region_grow(cloud, idx, nrm, candidate_mask=mask)
    assert np.all(labels[~mask] == NOISE)
    assert np.all(labels[mask] == 0)


def test_region_grow_deterministic():
    r = syn.hip(seed=5, n_points=1500, sigma=0.01)
    idx, nrm = _prepare(r.cloud)
    a = region_grow(r.cloud, idx, nrm)
    b = region_grow(r.cloud, build_index(r.cloud), nrm)
    np.testing.assert_array_equal(a, b)


# ------------------------------------------------------------------ local refinement


def test_refine_local_fixed_point_on_truth():
    # with exact plane normals the true labeling has zero cost at every point
    r = syn.gable(seed=2, n_points=2000)
    idx = build_index(r.cloud)
    exact = r.plane_normals[r.labels]
    out = refine_boundaries_local(r.cloud, idx, exact, r.labels)
    np.testing.assert_array_equal(out, r.labels)


def test_refine_local_near_fixed_point_with_estimated_normals():
    # ridge normals blend both planes, so a few ridge points may switch sides
    r = syn.gable(seed=2, n_points=2000)
    idx, nrm = _prepare(r.cloud)
    out = refine_boundaries_local(r.cloud, idx, nrm, r.labels)
    changed = out != r.labels
    assert changed.mean() < 0.005
    spacing = np.median(idx.knn(r.cloud.points, 2)[0][:, 1])
    assert np.all(syn.boundary_band(r.cloud.points, r.labels, 2 * spacing)[changed])


def test_refine_local_single_instance_identity(rng):
    pts = np.column_stack([rng.uniform(0, 5, (300, 2)), np.zeros(300)])
    cloud = PointCloud(pts)
    idx, nrm = _prepare(cloud)
    labels = np.zeros(300, dtype=np.int64)
    labels[:10] = NOISE
    np.testing.assert_array_equal(refine_boundaries_local(cloud, idx, nrm, labels), labels)


@pytest.mark.parametrize("seed", range(5))
def test_refine_local_restores_swapped_ridge_points(seed):
    r = syn.gable(seed=seed, n_points=2000, sigma=0.005)
    idx, nrm = _prepare(r.cloud)
    rng = np.random.default_rng(seed)
    near = np.flatnonzero(syn.boundary_band(r.cloud.points, r.labels, 0.5))
    swapped = rng.choice(near, size=int(0.05 * len(r.labels)), replace=False)
    bad = r.labels.copy()
    bad[swapped] = 1 - bad[swapped]
    out = refine_boundaries_local(r.cloud, idx, nrm, bad, iters=3)
    assert np.mean(out[swapped] == r.labels[swapped]) >= 0.8


@given(st.integers(0, 10_000))
def test_refine_local_permutation_equivariant_and_local(seed):
    r = syn.hip(seed=seed, n_points=600, sigma=0.01)
    idx, nrm = _prepare(r.cloud)
    rng = np.random.default_rng(seed)
    labels = r.labels.copy()
    flip = rng.random(len(labels)) < 0.05
    labels[flip] = rng.integers(0, r.n_planes, flip.sum())
    perm = rng.permutation(r.n_planes)
    relabeled = np.where(labels == NOISE, NOISE, perm[np.maximum(labels, 0)])
    a = refine_boundaries_local(r.cloud, idx, nrm, labels, iters=1)
    b = refine_boundaries_local(r.cloud, idx, nrm, relabeled, iters=1)
    np.testing.assert_array_equal(np.where(a == NOISE, NOISE, perm[np.maximum(a, 0)]), b)
    # points whose neighborhood has no other plane label are untouched
    nl = labels[idx.knn_all(10)]
    interior = ~((nl != labels[:, None]) & (nl != NOISE)).any(axis=1)
    np.testing.assert_array_equal(a[interior], labels[interior])


# ------------------------------------------------------------------ k-means


def test_kmeans_k1_identity(rng):
    pts = rng.normal(size=(20, 3))
    out = kmeans_split(pts, 1)
    assert len(out) == 1 and out[0].tolist() == list(range(20))


def test_kmeans_k_equals_m_singletons(rng):
    out = kmeans_split(rng.normal(size=(6, 3)), 6)
    assert sorted(c.tolist() for c in out) == [[i] for i in range(6)]


def test_kmeans_too_many_clusters():
    with pytest.raises(ValueError):
        kmeans_split(np.zeros((3, 3)), 4)


def _best_two_partition(pts):
    """Exhaustive 2-partition minimizing the within-cluster sum of squares."""
    m = len(pts)
    best, best_set = np.inf, None
    for mask in range(1, 2 ** (m - 1)):
        a = np.array([(mask >> i) & 1 for i in range(m)], dtype=bool)
        sse = sum(((pts[s] - pts[s].mean(axis=0)) ** 2).sum() for s in (a, ~a))
        if sse < best:
            best, best_set = sse, a
    return {frozenset(np.flatnonzero(best_set).tolist()), frozenset(np.flatnonzero(~best_set).tolist())}


@pytest.mark.parametrize("seed", range(10))
def test_kmeans_two_blobs_match_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(6, 13))
    na = int(rng.integers(2, m - 1))
    pts = np.vstack([rng.normal(0, 0.3, (na, 3)), rng.normal(0, 0.3, (m - na, 3)) + [10, 0, 0]])
    got = {frozenset(c.tolist()) for c in kmeans_split(pts, 2, seed=seed)}
    assert got == _best_two_partition(pts)


@given(st.integers(1, 60), st.integers(0, 2**32 - 1), st.data())
def test_kmeans_exactly_k_nonempty_disjoint(m, seed, data):
    k = data.draw(st.integers(1, m))
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 3, size=(m, 3)).astype(float)  # many duplicates
    out = kmeans_split(pts, k, seed=seed)
    assert len(out) == k and all(len(c) > 0 for c in out)
    assert sorted(np.concatenate(out).tolist()) == list(range(m))


def test_kmeans_deterministic_from_seed(rng):
    pts = rng.normal(size=(200, 3))
    a = kmeans_split(pts, 7, seed=3)
    b = kmeans_split(pts, 7, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


# ------------------------------------------------------------------ partitions


def _assert_refines(fine: SuperpointPartition, coarse: SuperpointPartition, n_points):
    owner = coarse.point_ids(n_points)
    for g, parent in zip(fine.groups, fine.parent):
        assert np.all(owner[g] == parent)


@given(st.integers(0, 10_000), st.sampled_from(syn.ROOF_KINDS), st.integers(5, 150))
def test_partitions_cover_and_refine(seed, kind, n):
    r = syn.make_roof(kind, seed, n_points=int(300 + seed % 500), sigma=0.01, outlier_frac=0.02)
    coarse = make_coarse(r.cloud)
    fine = make_fine(r.cloud, coarse, n=max(n, 2), seed=seed)
    coarse.check(len(r.cloud))
    fine.check(len(r.cloud))
    _assert_refines(fine, coarse, len(r.cloud))
    sizes = coarse.sizes()
    for gi, size in enumerate(sizes):
        if gi not in coarse.noise_group_ids and size > n:
            k = int(np.sum(fine.parent == gi))
            assert size / k <= n


def test_make_fine_rejects_small_n():
    r = syn.gable(seed=0, n_points=300)
    with pytest.raises(ValueError):
        make_fine(r.cloud, make_coarse(r.cloud), n=1)


def test_partition_from_labels_noise_group_last():
    p = partition_from_labels(np.array([1, NOISE, 1, 0]))
    assert [g.tolist() for g in p.groups] == [[3], [0, 2], [1]]
    assert p.noise_group_ids == (2,)


# ------------------------------------------------------------------ quality


def test_quality_of_ground_truth_partition():
    r = syn.hip(seed=1, n_points=800)
    q = superpoint_quality(partition_from_labels(r.labels), r.labels)
    assert q.boundary_purity == 1.0


def test_quality_group_spanning_two_equal_instances():
    gt = np.array([0, 0, 1, 1, 2, 2, 2, 2])
    part = SuperpointPartition([np.array([0, 1, 2, 3]), np.array([4, 5, 6, 7])], "fine")
    q = superpoint_quality(part, gt)
    # first group has purity 0.5, second 1.0, size weighted
    assert q.boundary_purity == pytest.approx(0.75)
    assert q.size_cv == 0.0


def test_quality_elongation_with_cloud():
    r = syn.gable(seed=4, n_points=600)
    coarse = make_coarse(r.cloud)
    q = superpoint_quality(coarse, r.labels, r.cloud)
    assert q.elongation.shape == (len(coarse),) and np.all(q.elongation >= 1)
    assert set(q.as_dict()) == {"boundary_purity", "size_cv", "elongation"}


@pytest.mark.parametrize("seed", range(4))
def test_fine_gable_quality_with_clutter(seed):
    r = syn.gable(seed=seed, n_points=2000, outlier_frac=0.02)
    coarse = make_coarse(r.cloud)
    fine = make_fine(r.cloud, coarse, n=50, seed=seed)
    qc, qf = superpoint_quality(coarse, r.labels), superpoint_quality(fine, r.labels)
    assert qf.boundary_purity >= 0.98
    assert qf.size_cv < qc.size_cv


@pytest.mark.parametrize("seed", range(4))
def test_fine_gable_quality_asymmetric_ridge(seed):
    r = syn.gable(seed=seed, n_points=2000, ridge_frac=0.3)
    coarse = make_coarse(r.cloud)
    fine = make_fine(r.cloud, coarse, n=50, seed=seed)
    qc, qf = superpoint_quality(coarse, r.labels), superpoint_quality(fine, r.labels)
    assert qf.boundary_purity >= 0.98
    assert qf.size_cv < qc.size_cv
