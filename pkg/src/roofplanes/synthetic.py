"""Synthetic roof point clouds with exact plane labels.

Roofs are height fields built from planes ``z = a*x + b*y + c``. Gable, hip
and pyramid roofs are lower envelopes of their planes over a rectangular
footprint; L-shaped roofs take the upper envelope of two gable wings on their
overlap. Points come from a jittered grid, so density is near-uniform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import NOISE, PointCloud

ROOF_KINDS = ("gable", "hip", "pyramid", "l_shaped")


@dataclass
class SyntheticRoof:
    cloud: PointCloud
    labels: np.ndarray
    plane_normals: np.ndarray  # (L, 3), unit, nonnegative z
    plane_offsets: np.ndarray  # (L,), n . p + d = 0
    kind: str

    @property
    def n_planes(self) -> int:
        return int(self.plane_normals.shape[0])


def _plane(a: float, b: float, c: float) -> Tuple[np.ndarray, float]:
    n = np.array([-a, -b, 1.0])
    norm = np.linalg.norm(n)
    return n / norm, -c / norm


def _jittered_grid(rng, xmin, xmax, ymin, ymax, spacing, jitter=0.3):
    xs = np.arange(xmin + spacing / 2, xmax, spacing)
    ys = np.arange(ymin + spacing / 2, ymax, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    xy = np.column_stack([gx.ravel(), gy.ravel()])
    xy += rng.uniform(-jitter, jitter, size=xy.shape) * spacing
    return xy


def _envelope(xy, coeffs, upper=False):
    z = np.stack([a * xy[:, 0] + b * xy[:, 1] + c for a, b, c in coeffs], axis=1)
    lab = np.argmax(z, axis=1) if upper else np.argmin(z, axis=1)
    return z[np.arange(len(xy)), lab], lab


def _finish(rng, xy, z, labels, coeffs, sigma, kind, outlier_frac=0.0):
    pts = np.column_stack([xy, z])
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, size=pts.shape)
    planes = [_plane(*c) for c in coeffs]
    # drop planes that ended up without points and relabel compactly
    used = np.unique(labels)
    remap = -np.ones(len(coeffs), dtype=np.int64)
    remap[used] = np.arange(used.size)
    labels = remap[labels]
    normals = np.array([planes[i][0] for i in used])
    offsets = np.array([planes[i][1] for i in used])
    n_out = int(round(outlier_frac * len(pts)))
    if n_out:
        # off-roof clutter: 0.5 - 3 m above a random roof location
        base = pts[rng.integers(len(pts), size=n_out)]
        out = base + np.column_stack([
            rng.uniform(-0.5, 0.5, size=(n_out, 2)), rng.uniform(0.5, 3.0, size=n_out)
        ])
        pts = np.vstack([pts, out])
        labels = np.concatenate([labels, np.full(n_out, NOISE)])
    return SyntheticRoof(PointCloud(pts, id=kind), labels.astype(np.int64), normals, offsets, kind)


def _spacing_for(area: float, n_points: int) -> float:
    return float(np.sqrt(area / n_points))


def gable(
    seed=None,
    n_points: int = 2000,
    sigma: float = 0.0,
    length: Optional[float] = None,
    width: Optional[float] = None,
    slopes_deg: Optional[Sequence[float]] = None,
    ridge_frac: Optional[float] = None,
    outlier_frac: float = 0.0,
) -> SyntheticRoof:
    """Two-plane gable roof over ``[0, length] x [0, width]``, ridge parallel to x."""
    rng = np.random.default_rng(seed)
    length = rng.uniform(9.0, 15.0) if length is None else length
    width = rng.uniform(6.0, 10.0) if width is None else width
    if slopes_deg is None:
        slopes_deg = rng.uniform(25.0, 40.0, size=2)
    ridge_frac = rng.uniform(0.4, 0.6) if ridge_frac is None else ridge_frac
    t1, t2 = np.tan(np.radians(slopes_deg))
    h = 3.0
    yr = ridge_frac * width
    zr = h + t1 * yr
    # plane 0 rises from y = 0, plane 1 rises from y = width; both meet at y = yr
    coeffs = [(0.0, t1, h), (0.0, -t2, zr + t2 * yr)]
    xy = _jittered_grid(rng, 0, length, 0, width, _spacing_for(length * width, n_points))
    z, lab = _envelope(xy, coeffs)
    return _finish(rng, xy, z, lab, coeffs, sigma, "gable", outlier_frac)


def hip(
    seed=None,
    n_points: int = 2000,
    sigma: float = 0.0,
    length: Optional[float] = None,
    width: Optional[float] = None,
    outlier_frac: float = 0.0,
) -> SyntheticRoof:
    """Four-plane hip roof: eaves on all sides, independent slopes."""
    rng = np.random.default_rng(seed)
    width = rng.uniform(6.0, 10.0) if width is None else width
    length = width * rng.uniform(1.3, 2.0) if length is None else length
    ts = np.tan(np.radians(rng.uniform(25.0, 40.0, size=4)))
    h = 3.0
    coeffs = [
        (0.0, ts[0], h),                    # rises from y = 0
        (0.0, -ts[1], h + ts[1] * width),   # rises from y = width
        (ts[2], 0.0, h),                    # rises from x = 0
        (-ts[3], 0.0, h + ts[3] * length),  # rises from x = length
    ]
    xy = _jittered_grid(rng, 0, length, 0, width, _spacing_for(length * width, n_points))
    z, lab = _envelope(xy, coeffs)
    return _finish(rng, xy, z, lab, coeffs, sigma, "hip", outlier_frac)


def pyramid(
    seed=None,
    n_points: int = 2000,
    sigma: float = 0.0,
    apex_shift: Optional[Sequence[float]] = None,
    outlier_frac: float = 0.0,
) -> SyntheticRoof:
    """Four triangular faces meeting in one apex over a near-square footprint.

    ``apex_shift`` is the apex offset from the footprint center as fractions
    of the side lengths; by default drawn from [-0.15, 0.15].
    """
    rng = np.random.default_rng(seed)
    width = rng.uniform(6.0, 10.0)
    length = width * rng.uniform(1.0, 1.15)
    if apex_shift is None:
        apex_shift = rng.uniform(-0.15, 0.15, size=2)
    ax = length * (0.5 + apex_shift[0])
    ay = width * (0.5 + apex_shift[1])
    h = 3.0
    rise = np.tan(np.radians(rng.uniform(25.0, 40.0))) * min(ax, ay, length - ax, width - ay)
    coeffs = [
        (0.0, rise / ay, h),
        (0.0, -rise / (width - ay), h + rise * width / (width - ay)),
        (rise / ax, 0.0, h),
        (-rise / (length - ax), 0.0, h + rise * length / (length - ax)),
    ]
    xy = _jittered_grid(rng, 0, length, 0, width, _spacing_for(length * width, n_points))
    z, lab = _envelope(xy, coeffs)
    return _finish(rng, xy, z, lab, coeffs, sigma, "pyramid", outlier_frac)


def l_shaped(
    seed=None, n_points: int = 2000, sigma: float = 0.0, outlier_frac: float = 0.0
) -> SyntheticRoof:
    """Cross-gable L roof.

    Wing A covers [0, la] x [0, wa] with its ridge along x. Wing B covers
    [0, wb] x [wa / 2, lb] with a lower ridge along y and runs into the back
    slope of wing A, forming two valleys.
    """
    rng = np.random.default_rng(seed)
    wa = rng.uniform(7.0, 10.0)
    wb = rng.uniform(5.0, 0.8 * wa)
    la = wb + rng.uniform(4.0, 8.0)
    lb = wa + rng.uniform(4.0, 8.0)
    ta = np.tan(np.radians(rng.uniform(30.0, 40.0)))
    tb = np.tan(np.radians(rng.uniform(25.0, 30.0)))
    h = 3.0
    wing_a = [(0.0, ta, h), (0.0, -ta, h + ta * wa)]
    wing_b = [(tb, 0.0, h), (-tb, 0.0, h + tb * wb)]
    area = la * wa + wb * (lb - wa)
    xy = _jittered_grid(rng, 0, la, 0, lb, _spacing_for(area, n_points))
    in_a = xy[:, 1] < wa
    in_b = (xy[:, 0] < wb) & (xy[:, 1] >= wa / 2)
    keep = in_a | in_b
    xy, in_a, in_b = xy[keep], in_a[keep], in_b[keep]
    za, lab_a = _envelope(xy, wing_a)
    zb, lab_b = _envelope(xy, wing_b)
    za = np.where(in_a, za, -np.inf)
    zb = np.where(in_b, zb, -np.inf)
    use_a = za >= zb
    z = np.where(use_a, za, zb)
    lab = np.where(use_a, lab_a, lab_b + 2)
    return _finish(rng, xy, z, lab, wing_a + wing_b, sigma, "l_shaped", outlier_frac)


def make_roof(
    kind: str, seed=None, n_points: int = 2000, sigma: float = 0.0, outlier_frac: float = 0.0
) -> SyntheticRoof:
    """Build a roof of the given kind; outliers are labeled NOISE and come last."""
    builders = {"gable": gable, "hip": hip, "pyramid": pyramid, "l_shaped": l_shaped}
    if kind not in builders:
        raise ValueError(f"unknown roof kind {kind!r}; expected one of {ROOF_KINDS}")
    return builders[kind](seed, n_points=n_points, sigma=sigma, outlier_frac=outlier_frac)


def roof_suite(
    n_samples: int = 20,
    seed: int = 0,
    n_range: Tuple[int, int] = (1000, 4000),
    sigma_max: float = 0.02,
    kinds: Sequence[str] = ROOF_KINDS,
    outlier_range: Tuple[float, float] = (0.01, 0.03),
) -> List[SyntheticRoof]:
    """Deterministic mix of roof kinds with random sizes, noise levels and clutter.

    ``n_range`` bounds the total point count, outliers included.
    """
    rng = np.random.default_rng(seed)
    roofs = []
    for i in range(n_samples):
        kind = kinds[i % len(kinds)]
        frac = float(rng.uniform(*outlier_range))
        n = int(rng.integers(n_range[0], n_range[1] + 1) / (1.0 + frac))
        sigma = float(rng.uniform(0.0, sigma_max))
        roofs.append(make_roof(kind, int(rng.integers(2**31)), n, sigma, frac))
    return roofs


def boundary_band(points: np.ndarray, labels: np.ndarray, width: float) -> np.ndarray:
    """Mask of labeled points within horizontal ``width`` of a differently labeled point."""
    labels = np.asarray(labels)
    xy = np.asarray(points)[:, :2]
    band = np.zeros(len(labels), dtype=bool)
    for lbl in np.unique(labels[labels != NOISE]):
        own = labels == lbl
        other = (labels != lbl) & (labels != NOISE)
        if not other.any():
            continue
        d, _ = cKDTree(xy[other]).query(xy[own])
        band[np.flatnonzero(own)[d <= width]] = True
    return band


def noise_cube(seed=None, n_points: int = 500, size: float = 10.0) -> PointCloud:
    rng = np.random.default_rng(seed)
    return PointCloud(rng.uniform(0.0, size, size=(n_points, 3)), id="noise")
