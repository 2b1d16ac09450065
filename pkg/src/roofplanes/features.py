"""Per-point handcrafted features: PCA dimensionality, verticality and contour."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .cloud_io import PointCloud
from .geometry import NeighborIndex, build_index, canonicalize_normals, neighborhood_eigen

TWO_PI = 2.0 * np.pi
DEFAULT_K_FEATURES = 16
DEFAULT_TAU = np.pi / 2


def geometric_features(
    cloud: PointCloud, index: Optional[NeighborIndex] = None, k: int = DEFAULT_K_FEATURES
) -> np.ndarray:
    """Linearity, planarity, scattering and verticality for every point.

    With neighborhood covariance eigenvalues l1 >= l2 >= l3:

    * linearity  = (l1 - l2) / l1
    * planarity  = (l2 - l3) / l1
    * scattering = l3 / l1
    * verticality = 1 - |n_z| for the PCA normal n

    Returns an (N, 4) array. Coincident neighborhoods (l1 == 0) get all zeros.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    if index is None:
        index = build_index(cloud)
    nbrs = index.knn_all(k)
    evals, evecs = neighborhood_eigen(cloud.points, nbrs)
    l1, l2, l3 = evals[:, 0], evals[:, 1], evals[:, 2]
    out = np.zeros((len(cloud), 4))
    ok = l1 > 0
    out[ok, 0] = (l1[ok] - l2[ok]) / l1[ok]
    out[ok, 1] = (l2[ok] - l3[ok]) / l1[ok]
    out[ok, 2] = l3[ok] / l1[ok]
    normals = canonicalize_normals(evecs[:, :, 2])
    out[ok, 3] = 1.0 - np.abs(normals[ok, 2])
    return np.clip(out, 0.0, 1.0)


def max_angular_gap(angles: np.ndarray) -> float:
    """Largest circular gap between directions given as angles in radians."""
    a = np.sort(np.mod(np.asarray(angles, dtype=np.float64), TWO_PI))
    if a.size < 2:
        return TWO_PI
    gaps = np.diff(a)
    wrap = a[0] + TWO_PI - a[-1]
    return float(max(gaps.max(), wrap))


def contour_feature(
    cloud: PointCloud,
    index: Optional[NeighborIndex] = None,
    k: int = DEFAULT_K_FEATURES,
    tau: float = DEFAULT_TAU,
):
    """Largest angular gap between neighbor directions in each tangent plane.

    Neighbors are projected onto the PCA tangent plane of the point, their
    directions sorted counterclockwise, and the widest gap between consecutive
    directions (including the wrap-around) is reported. Points whose gap
    exceeds ``tau`` are flagged as contour points.

    Returns ``(alpha, is_contour)`` arrays of length N.
    """
    if k < 4:
        raise ValueError("k must be >= 4 for the contour feature")
    if not 0 < tau < TWO_PI:
        raise ValueError("tau must lie in (0, 2*pi)")
    if index is None:
        index = build_index(cloud)
    pts = cloud.points
    nbrs = index.knn_all(k)
    _, evecs = neighborhood_eigen(pts, nbrs)
    e1, e2 = evecs[:, :, 0], evecs[:, :, 1]

    offsets = pts[nbrs] - pts[:, None, :]  # (N, k, 3)
    u = np.einsum("nkj,nj->nk", offsets, e1)
    v = np.einsum("nkj,nj->nk", offsets, e2)
    planar_len = np.hypot(u, v)
    scale = np.maximum(np.linalg.norm(offsets, axis=2).max(axis=1, keepdims=True), 1e-300)
    usable = planar_len > 1e-12 * scale

    ang = np.mod(np.arctan2(v, u), TWO_PI)
    ang = np.where(usable, ang, np.inf)
    ang.sort(axis=1)
    m = usable.sum(axis=1)

    alpha = np.full(len(cloud), TWO_PI)
    rows = np.flatnonzero(m >= 2)
    if rows.size:
        a = ang[rows]
        cnt = m[rows]
        with np.errstate(invalid="ignore"):
            diffs = np.diff(a, axis=1)
        col = np.arange(diffs.shape[1])[None, :]
        diffs = np.where(col < (cnt - 1)[:, None], diffs, -np.inf)
        last = a[np.arange(rows.size), cnt - 1]
        wrap = a[:, 0] + TWO_PI - last
        alpha[rows] = np.maximum(diffs.max(axis=1), wrap)
    return alpha, alpha > tau


def feature_table(
    cloud: PointCloud,
    index: Optional[NeighborIndex] = None,
    k: int = DEFAULT_K_FEATURES,
    k_contour: int = DEFAULT_K_FEATURES,
    tau: float = DEFAULT_TAU,
) -> np.ndarray:
    """N x 6 export: linearity, planarity, scattering, verticality, contour flag, alpha / 2pi."""
    if index is None:
        index = build_index(cloud)
    geo = geometric_features(cloud, index, k)
    alpha, flag = contour_feature(cloud, index, k_contour, tau)
    return np.column_stack([geo, flag.astype(float), alpha / TWO_PI])
