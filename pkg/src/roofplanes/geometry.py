"""Neighbor queries, normal estimation, plane fitting and point-to-plane distances."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import PointCloud

DEFAULT_K_NORMALS = 16
DEFAULT_LAMBDA = 20.0

_TIE_EPS = 1e-12


class GeometryError(ValueError):
    pass


class NeighborIndex:
    """Exact k-nearest / radius neighbor index over a fixed point set."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise GeometryError("cannot index an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts)
        self._knn_cache: dict = {}

    def __len__(self) -> int:
        return self.points.shape[0]

    def knn(self, queries, k: int):
        """Return (distances, indices) of the k nearest neighbors of each query point."""
        k_eff = min(int(k), len(self))
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        dist, idx = self._tree.query(q, k=k_eff)
        return dist.reshape(q.shape[0], k_eff), idx.reshape(q.shape[0], k_eff)

    def knn_all(self, k: int) -> np.ndarray:
        """Neighbor table (N, k) for every indexed point; row i starts with i itself."""
        k_eff = min(int(k), len(self))
        if k_eff not in self._knn_cache:
            dist, idx = self.knn(self.points, k_eff)
            # duplicate points can displace the query point from column 0
            rows = np.arange(len(self))
            wrong = idx[:, 0] != rows
            if np.any(wrong):
                for i in np.flatnonzero(wrong):
                    r = idx[i].tolist()
                    if i in r:
                        r.remove(i)
                    else:
                        r.pop()
                    idx[i] = [i] + r
            idx.setflags(write=False)
            self._knn_cache[k_eff] = idx
        return self._knn_cache[k_eff]

    def radius(self, query, r: float) -> np.ndarray:
        return np.asarray(sorted(self._tree.query_ball_point(np.asarray(query, float), r)),
                          dtype=np.int64)

    def pairs_within(self, r: float) -> np.ndarray:
        """All index pairs (i < j) with distance <= r, as an (M, 2) array."""
        return self._tree.query_pairs(r, output_type="ndarray")


def build_index(cloud: PointCloud) -> NeighborIndex:
    if len(cloud) == 0:
        raise GeometryError("cannot index an empty cloud")
    return NeighborIndex(cloud.points)


def canonicalize_normals(normals: np.ndarray) -> np.ndarray:
    """Flip normals to nonnegative z; ties fall back to y, then x."""
    n = np.array(normals, dtype=np.float64, copy=True).reshape(-1, 3)
    z, y, x = n[:, 2], n[:, 1], n[:, 0]
    flip = (z < -_TIE_EPS) | (
        (np.abs(z) <= _TIE_EPS) & ((y < -_TIE_EPS) | ((np.abs(y) <= _TIE_EPS) & (x < 0)))
    )
    n[flip] *= -1.0
    return n


def neighborhood_eigen(points: np.ndarray, neighbors: np.ndarray):
    """Batch covariance eigen-decomposition of neighborhoods.

    Returns eigenvalues sorted descending (N, 3) and matching eigenvectors as
    columns (N, 3, 3).
    """
    nb = points[neighbors]  # (N, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighbors.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[:, ::-1], 0.0, None)
    evecs = evecs[:, :, ::-1]
    return evals, evecs


def estimate_normals(
    cloud: PointCloud,
    index: Optional[NeighborIndex] = None,
    k: int = DEFAULT_K_NORMALS,
    return_reliability: bool = False,
):
    """PCA normals from the k nearest neighbors of each point.

    A normal is flagged unreliable when the neighborhood covariance has rank
    below 2 (collinear or coincident points); it is still returned, oriented by
    the usual sign rule.
    """
    if k < 3:
        raise GeometryError("k must be >= 3 for normal estimation")
    if index is None:
        index = build_index(cloud)
    nbrs = index.knn_all(k)
    evals, evecs = neighborhood_eigen(cloud.points, nbrs)
    normals = canonicalize_normals(evecs[:, :, 2])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if return_reliability:
        scale = np.maximum(evals[:, 0], np.finfo(float).tiny)
        reliable = evals[:, 1] > 1e-12 * scale
        reliable &= evals[:, 0] > 0
        return normals, reliable
    return normals


def normal_cosine_distance(normals: np.ndarray, plane_normal: np.ndarray) -> np.ndarray:
    """``1 - |n . n_plane|``, in [0, 1]; insensitive to normal orientation."""
    dots = np.abs(np.asarray(normals, dtype=np.float64) @ np.asarray(plane_normal, float))
    return np.clip(1.0 - dots, 0.0, 1.0)


def composite_distance(p2p, n2n, lam: float = DEFAULT_LAMBDA):
    """Weighted point-to-plane distance: ``lam * p2p + n2n``.

    Values of ``lam`` above 1 weight the perpendicular distance more heavily,
    which is the useful regime since it is the more robust of the two terms.
    """
    if lam <= 0:
        raise GeometryError(f"lambda must be positive, got {lam}")
    return lam * p2p + n2n


@dataclass
class PlaneModel:
    """Plane ``normal . p + offset = 0`` with the member-derived thresholds."""

    normal: np.ndarray
    offset: float
    support: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    t_dist: float = 0.0
    t_norm: Optional[float] = None  # None when no normals were available

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(np.asarray(points, dtype=np.float64) @ self.normal + self.offset)


def plane_from_moments(centroid: np.ndarray, cov: np.ndarray):
    """Total-least-squares plane from first and second moments; returns (normal, offset, evals)."""
    evals, evecs = np.linalg.eigh(cov)
    normal = canonicalize_normals(evecs[:, 0])[0]
    normal /= np.linalg.norm(normal)
    return normal, -float(normal @ centroid), evals[::-1]


def fit_plane(cloud: PointCloud, indices, normals: Optional[np.ndarray] = None) -> PlaneModel:
    """Total-least-squares plane through the selected points.

    ``t_dist`` is the largest member perpendicular distance; ``t_norm`` the
    largest member normal cosine distance, or None without normals.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size < 3:
        raise GeometryError("need at least 3 points to fit a plane")
    pts = cloud.points[idx]
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / idx.size
    normal, offset, evals = plane_from_moments(centroid, cov)
    scale = max(evals[0], np.finfo(float).tiny)
    if evals[0] <= 0 or evals[1] <= 1e-12 * scale:
        raise GeometryError("degenerate (collinear or coincident) point set")
    dist = np.abs(centered @ normal)
    if normals is None:
        normals = cloud.normals
    t_norm = None
    if normals is not None:
        t_norm = float(normal_cosine_distance(np.asarray(normals)[idx], normal).max())
    return PlaneModel(normal, offset, idx, float(dist.max()), t_norm)
