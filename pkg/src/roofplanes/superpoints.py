"""Two-stage superpoint generation and superpoint quality statistics.

Stage 1 produces coarse superpoints with accurate boundaries: strict region
growing followed by a local boundary refinement. Stage 2 splits every coarse
superpoint (and the NOISE set) with K-means on 3D coordinates so that fine
superpoints have similar sizes and shapes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .cloud_io import NOISE, PointCloud, as_labeling
from .features import geometric_features
from .geometry import (
    DEFAULT_LAMBDA,
    NeighborIndex,
    build_index,
    composite_distance,
    estimate_normals,
    plane_from_moments,
)

DEFAULT_N = 100
DEFAULT_K_BOUNDARY = 10


@dataclass
class GrowthParams:
    """Admission thresholds for region growing.

    The defaults are deliberately strict so that a region does not leak across
    a plane boundary.
    """

    t_dist: float = 0.05
    t_norm: float = 0.1
    k_growth: int = 16
    min_region: int = 10
    refit_period: int = 32
    # regions whose second principal spread is below this many point spacings are lines, not planes
    min_width: float = 1.0

    def validate(self) -> "GrowthParams":
        if not self.t_dist > 0:
            raise ValueError(f"t_dist must be > 0, got {self.t_dist}")
        if not 0 < self.t_norm <= 1:
            raise ValueError(f"t_norm must lie in (0, 1], got {self.t_norm}")
        if self.k_growth < 3:
            raise ValueError(f"k_growth must be >= 3, got {self.k_growth}")
        if self.min_region < 3:
            raise ValueError(f"min_region must be >= 3, got {self.min_region}")
        if self.refit_period < 1:
            raise ValueError(f"refit_period must be >= 1, got {self.refit_period}")
        if self.min_width < 0:
            raise ValueError(f"min_width must be >= 0, got {self.min_width}")
        return self


@dataclass
class SuperpointPartition:
    groups: List[np.ndarray]
    stage: str  # "coarse" | "fine"
    noise_group_ids: Tuple[int, ...] = ()
    parent: Optional[np.ndarray] = None  # fine only: coarse group id of each fine group

    def __len__(self) -> int:
        return len(self.groups)

    def point_ids(self, n_points: int) -> np.ndarray:
        """Per-point group id (the partition export format)."""
        ids = np.full(n_points, -1, dtype=np.int64)
        for g, members in enumerate(self.groups):
            ids[members] = g
        return ids

    def sizes(self) -> np.ndarray:
        return np.array([len(g) for g in self.groups], dtype=np.int64)

    def check(self, n_points: int) -> None:
        """Raise AssertionError unless the groups are a disjoint, full, non-empty cover."""
        seen = np.zeros(n_points, dtype=np.int64)
        for g in self.groups:
            assert len(g) > 0, "empty superpoint"
            np.add.at(seen, g, 1)
        assert np.all(seen == 1), "superpoints must cover every point exactly once"


# ----------------------------------------------------------------- region growing


def region_grow(
    cloud: PointCloud,
    index: NeighborIndex,
    normals: np.ndarray,
    params: Optional[GrowthParams] = None,
    candidate_mask: Optional[np.ndarray] = None,
    planarity: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Plane segmentation by region growing.

    Seeds are taken in order of decreasing planarity (ties by index). A region
    grows breadth-first over the k-NN graph; a candidate joins when its
    distance to the region plane is at most ``t_dist`` and its normal cosine
    distance is at most ``t_norm``. The plane is refitted every
    ``refit_period`` admissions. Regions smaller than ``min_region``, or
    narrower than ``min_width`` median point spacings along their second
    principal axis, are released. Points outside ``candidate_mask`` are never
    labeled.
    """
    params = (params or GrowthParams()).validate()
    n = len(cloud)
    labels = np.full(n, NOISE, dtype=np.int64)
    cand = np.ones(n, dtype=bool) if candidate_mask is None else np.asarray(candidate_mask, bool)
    if not cand.any():
        return labels
    if planarity is None:
        planarity = geometric_features(cloud, index, params.k_growth)[:, 1]
    cidx = np.flatnonzero(cand)
    order = cidx[np.lexsort((cidx, -planarity[cidx]))].tolist()

    nbr_arr = index.knn_all(params.k_growth)
    nbr = nbr_arr.tolist()
    min_var = 0.0
    if params.min_width > 0 and nbr_arr.shape[1] > 1:
        spacing = float(np.median(np.linalg.norm(cloud.points[nbr_arr[:, 1]] - cloud.points, axis=1)))
        min_var = (params.min_width * spacing) ** 2
    pts = cloud.points.tolist()
    nrm = np.asarray(normals, dtype=np.float64).tolist()
    is_cand = cand.tolist()
    owner = [NOISE] * n
    stamp = [0] * n
    tried = [False] * n
    t_dist, t_norm = params.t_dist, params.t_norm
    period = params.refit_period
    next_label = 0
    attempt = 0

    for s in order:
        if owner[s] != NOISE or tried[s]:
            continue
        tried[s] = True
        attempt += 1
        stamp[s] = attempt
        members = [s]
        ox, oy, oz = pts[s]  # moments are accumulated relative to the seed
        nx, ny, nz = nrm[s]
        d = 0.0
        m1 = [0.0, 0.0, 0.0]
        m2 = [0.0] * 6  # xx xy xz yy yz zz
        since = 0
        queue = deque([s])
        while queue:
            i = queue.popleft()
            for j in nbr[i]:
                if stamp[j] == attempt or owner[j] != NOISE or not is_cand[j]:
                    continue
                px, py, pz = pts[j]
                qx, qy, qz = px - ox, py - oy, pz - oz
                if abs(nx * qx + ny * qy + nz * qz + d) > t_dist:
                    continue
                ax, ay, az = nrm[j]
                if 1.0 - abs(nx * ax + ny * ay + nz * az) > t_norm:
                    continue
                stamp[j] = attempt
                members.append(j)
                queue.append(j)
                m1[0] += qx; m1[1] += qy; m1[2] += qz
                m2[0] += qx * qx; m2[1] += qx * qy; m2[2] += qx * qz
                m2[3] += qy * qy; m2[4] += qy * qz; m2[5] += qz * qz
                since += 1
                if since >= period:
                    since = 0
                    normal, d, _ = plane_from_moments(*_moment_cov(m1, m2, len(members)))
                    nx, ny, nz = normal.tolist()
        if (len(members) >= params.min_region
                and np.linalg.eigvalsh(_moment_cov(m1, m2, len(members))[1])[1] >= min_var):
            for m in members:
                owner[m] = next_label
            next_label += 1

    labels[:] = owner
    return labels


def _moment_cov(m1, m2, cnt):
    c = np.array(m1) / cnt
    xx, xy, xz, yy, yz, zz = (v / cnt for v in m2)
    cov = np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]]) - np.outer(c, c)
    return c, cov


# ------------------------------------------------------------ boundary refinement


def fit_label_planes(points: np.ndarray, labels: np.ndarray) -> Dict[int, Tuple[np.ndarray, float]]:
    """TLS plane for every non-NOISE label with a non-degenerate support."""
    planes = {}
    for lbl in np.unique(labels):
        if lbl == NOISE:
            continue
        p = points[labels == lbl]
        if len(p) < 3:
            continue
        c = p.mean(axis=0)
        q = p - c
        cov = q.T @ q / len(p)
        normal, offset, evals = plane_from_moments(c, cov)
        if evals[1] <= 1e-12 * max(evals[0], np.finfo(float).tiny):
            continue
        planes[int(lbl)] = (normal, offset)
    return planes


def refine_boundaries(
    cloud: PointCloud,
    index: NeighborIndex,
    normals: np.ndarray,
    labeling: np.ndarray,
    lam: float = DEFAULT_LAMBDA,
    k_b: int = DEFAULT_K_BOUNDARY,
    iters: int = 1,
    refit: bool = True,
    noise_gate: Optional[float] = None,
    planes: Optional[Dict[int, Tuple[np.ndarray, float]]] = None,
) -> np.ndarray:
    """Reassign boundary points to the neighboring plane of least composite distance.

    A point is on a boundary when its ``k_b`` nearest neighbors carry a
    non-NOISE label different from its own. Such a point takes, among the
    labels found in its neighborhood (its own included), the one whose plane
    minimizes ``lam * p2p + n2n``; its own label wins ties. All boundary
    points of an iteration are decided against the labeling at the start of
    that iteration.

    NOISE points are only considered when ``noise_gate`` is given, and then
    only join a plane lying within ``noise_gate`` meters.

    With ``refit`` the planes are refitted between iterations; otherwise they
    are fitted once from the input labeling. ``planes`` (label -> (normal,
    offset), as from ``fit_label_planes``) replaces that initial fit.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    labels = as_labeling(labeling, len(cloud)).copy()
    pts = cloud.points
    normals = np.asarray(normals, dtype=np.float64)
    nbrs = index.knn_all(k_b)
    planes = fit_label_planes(pts, labels) if planes is None else dict(planes)

    for it in range(iters):
        if not planes:
            break
        if it > 0 and refit:
            planes = fit_label_planes(pts, labels)
        plane_ids = np.array(sorted(planes), dtype=np.int64)
        col_of = np.full(labels.max() + 2, -1, dtype=np.int64)
        col_of[plane_ids] = np.arange(plane_ids.size)

        nl = labels[nbrs]
        differs = (nl != labels[:, None]) & (nl != NOISE)
        boundary = differs.any(axis=1)
        if noise_gate is None:
            boundary &= labels != NOISE
        rows = np.flatnonzero(boundary)
        if rows.size == 0:
            break

        cand = np.zeros((rows.size, plane_ids.size), dtype=bool)
        cols = col_of[nl[rows]]  # NOISE maps to col_of[-1] == -1
        r_idx = np.repeat(np.arange(rows.size), cols.shape[1])
        valid = cols.ravel() >= 0
        cand[r_idx[valid], cols.ravel()[valid]] = True

        pn = np.array([planes[i][0] for i in plane_ids])
        po = np.array([planes[i][1] for i in plane_ids])
        p2p = np.abs(pts[rows] @ pn.T + po)
        n2n = np.clip(1.0 - np.abs(normals[rows] @ pn.T), 0.0, 1.0)
        cost = np.where(cand, composite_distance(p2p, n2n, lam), np.inf)
        best = np.argmin(cost, axis=1)
        best_cost = cost[np.arange(rows.size), best]

        own = labels[rows]
        own_col = col_of[own]
        has_own = own_col >= 0
        own_cost = np.full(rows.size, np.inf)
        own_cost[has_own] = cost[np.flatnonzero(has_own), own_col[has_own]]
        new = np.where(np.isfinite(best_cost), plane_ids[best], own)
        new = np.where(has_own & (own_cost <= best_cost), own, new)
        if noise_gate is not None:
            is_noise = own == NOISE
            gated = p2p[np.arange(rows.size), best] <= noise_gate
            new = np.where(is_noise & ~gated, NOISE, new)

        changed = new != labels[rows]
        if not changed.any():
            break
        labels[rows] = new
    return labels


def refine_boundaries_local(
    cloud: PointCloud,
    index: NeighborIndex,
    normals: np.ndarray,
    labeling: np.ndarray,
    lam: float = DEFAULT_LAMBDA,
    k_b: int = DEFAULT_K_BOUNDARY,
    iters: int = 3,
    noise_gate: Optional[float] = None,
) -> np.ndarray:
    """Iterative boundary refinement with plane refits between passes."""
    return refine_boundaries(cloud, index, normals, labeling, lam, k_b, iters,
                             refit=True, noise_gate=noise_gate)


def compact_labels(labels: np.ndarray, min_size: int = 1) -> np.ndarray:
    """Dissolve labels with fewer than ``min_size`` points and renumber 0..L-1 by label order."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full_like(labels, NOISE)
    ids, counts = np.unique(labels[labels != NOISE], return_counts=True)
    keep = ids[counts >= min_size]
    for new, old in enumerate(keep):
        out[labels == old] = new
    return out


# ------------------------------------------------------------------ stage 1


def segment_coarse(
    cloud: PointCloud,
    index: Optional[NeighborIndex] = None,
    normals: Optional[np.ndarray] = None,
    params: Optional[GrowthParams] = None,
    lam: float = DEFAULT_LAMBDA,
    k_b: int = DEFAULT_K_BOUNDARY,
    iters: int = 3,
    noise_gate: Optional[float] = None,
    k_normals: int = 16,
) -> np.ndarray:
    """Strict region growing followed by local boundary refinement.

    ``noise_gate`` defaults to twice ``t_dist``: NOISE points adjacent to a
    region rejoin it when they lie that close to its plane.
    """
    params = (params or GrowthParams()).validate()
    if index is None:
        index = build_index(cloud)
    if normals is None:
        normals = cloud.normals if cloud.normals is not None else estimate_normals(cloud, index, k_normals)
    if noise_gate is None:
        noise_gate = 2.0 * params.t_dist
    labels = region_grow(cloud, index, normals, params)
    if labels.max(initial=NOISE) == NOISE:
        return labels
    labels = refine_boundaries_local(cloud, index, normals, labels, lam, k_b, iters, noise_gate)
    return compact_labels(labels, params.min_region)


def partition_from_labels(labels: np.ndarray, stage: str = "coarse") -> SuperpointPartition:
    """One group per instance in label order, NOISE collected in a final group."""
    labels = np.asarray(labels)
    groups = [np.flatnonzero(labels == lbl) for lbl in np.unique(labels[labels != NOISE])]
    noise_ids: Tuple[int, ...] = ()
    noise = np.flatnonzero(labels == NOISE)
    if noise.size:
        noise_ids = (len(groups),)
        groups.append(noise)
    return SuperpointPartition(groups, stage, noise_ids)


def make_coarse(cloud: PointCloud, index: Optional[NeighborIndex] = None,
                normals: Optional[np.ndarray] = None, **kwargs) -> SuperpointPartition:
    return partition_from_labels(segment_coarse(cloud, index, normals, **kwargs), "coarse")


# ------------------------------------------------------------------ stage 2


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = x.shape[0]
    chosen = [int(rng.integers(m))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(m, p=d2 / total))
        else:
            # only duplicates of existing centers remain
            free = np.setdiff1d(np.arange(m), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[chosen].copy()


def _repair_empty(x, assign, centers):
    k = centers.shape[0]
    counts = np.bincount(assign, minlength=k)
    for e in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        members = np.flatnonzero(assign == big)
        far = members[int(np.argmax(np.sum((x[members] - centers[big]) ** 2, axis=1)))]
        assign[far] = e
        centers[e] = x[far]
        counts[big] -= 1
        counts[e] = 1
        centers[big] = x[assign == big].mean(axis=0)
    return assign, centers


def kmeans_split(points: np.ndarray, k: int, seed=0, max_iter: int = 100) -> List[np.ndarray]:
    """Lloyd K-means on 3D coordinates with k-means++ seeding.

    Returns exactly ``k`` non-empty arrays of row positions into ``points``.
    Empty clusters are repaired by moving the farthest member of the largest
    cluster into them.
    """
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > m:
        raise ValueError(f"cannot form {k} clusters from {m} points")
    if k == 1:
        return [np.arange(m)]
    if k == m:
        return [np.array([i]) for i in range(m)]
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    assign = None
    for _ in range(max_iter):
        d2 = (
            np.sum(x * x, axis=1)[:, None]
            - 2.0 * x @ centers.T
            + np.sum(centers * centers, axis=1)[None, :]
        )
        new = np.argmin(d2, axis=1)
        new, centers = _repair_empty(x, new, centers)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        centers = sums / np.bincount(assign, minlength=k)[:, None]
    return [np.flatnonzero(assign == c) for c in range(k)]


def fine_cluster_count(size: int, n: int, noise: bool = False) -> int:
    """Number of K-means clusters for a coarse group of ``size`` points.

    Regular groups use ceil(size / n) when larger than ``n`` and
    ceil(size / 2) otherwise; the NOISE group uses 2 * ceil(size / n).
    The result never exceeds ``size``.
    """
    if size <= 0:
        return 0
    if noise:
        k = 2 * math.ceil(size / n)
    elif size > n:
        k = math.ceil(size / n)
    else:
        k = math.ceil(size / 2)
    return max(1, min(k, size))


def make_fine(
    cloud: PointCloud, coarse: SuperpointPartition, n: int = DEFAULT_N, seed=0
) -> SuperpointPartition:
    """Split each coarse group (and the NOISE group) into size-equalized K-means clusters."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    pts = cloud.points
    groups: List[np.ndarray] = []
    parents: List[int] = []
    noise_ids: List[int] = []
    noise_set = set(coarse.noise_group_ids)
    for gi, members in enumerate(coarse.groups):
        members = np.asarray(members, dtype=np.int64)
        is_noise = gi in noise_set
        k = fine_cluster_count(members.size, n, is_noise)
        for cluster in kmeans_split(pts[members], k, seed=[int(seed), gi]):
            if is_noise:
                noise_ids.append(len(groups))
            groups.append(members[cluster])
            parents.append(gi)
    return SuperpointPartition(groups, "fine", tuple(noise_ids), np.asarray(parents, dtype=np.int64))


# ------------------------------------------------------------------ quality


@dataclass
class SuperpointQuality:
    boundary_purity: float
    size_cv: float
    elongation: np.ndarray = field(default_factory=lambda: np.empty(0))

    def as_dict(self) -> dict:
        e = self.elongation[np.isfinite(self.elongation)]
        shape = {}
        if e.size:
            shape = {
                "mean": float(e.mean()),
                "median": float(np.median(e)),
                "p90": float(np.percentile(e, 90)),
                "cv": float(e.std() / e.mean()),
            }
        return {
            "boundary_purity": self.boundary_purity,
            "size_cv": self.size_cv,
            "elongation": shape,
        }


def superpoint_quality(
    partition: SuperpointPartition, gt, cloud: Optional[PointCloud] = None
) -> SuperpointQuality:
    """Label purity, size spread and shape spread of a partition.

    * boundary_purity: size-weighted mean over groups of the dominant
      ground-truth label share (NOISE counts as a label).
    * size_cv: coefficient of variation of group sizes.
    * elongation: per-group ratio of the two largest covariance eigenvalues
      (needs ``cloud``; inf for groups with a degenerate second axis).
    """
    gt = np.asarray(gt)
    sizes = partition.sizes().astype(float)
    dominant = 0
    for g in partition.groups:
        _, counts = np.unique(gt[g], return_counts=True)
        dominant += counts.max()
    purity = float(dominant / sizes.sum()) if sizes.sum() else 0.0
    cv = float(sizes.std() / sizes.mean()) if sizes.size else 0.0
    elong = np.empty(0)
    if cloud is not None:
        vals = []
        for g in partition.groups:
            if len(g) < 3:
                vals.append(np.inf)
                continue
            q = cloud.points[g] - cloud.points[g].mean(axis=0)
            ev = np.linalg.eigvalsh(q.T @ q / len(g))[::-1]
            vals.append(ev[0] / ev[1] if ev[1] > 1e-12 * max(ev[0], 1e-300) else np.inf)
        elong = np.asarray(vals)
    return SuperpointQuality(purity, cv, elong)
