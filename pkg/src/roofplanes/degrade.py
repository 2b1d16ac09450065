"""Dataset degradation operators for robustness studies.

Every operator takes an explicit seed and is deterministic given its inputs.
"""

from __future__ import annotations

import math
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .cloud_io import NOISE, PointCloud, as_labeling
from .geometry import NeighborIndex, build_index
from .superpoints import fit_label_planes

OPERATORS = ("downsample", "density", "precision", "boundary")


def downsample(cloud: PointCloud, labeling=None, keep_fraction: float = 0.5, seed=0):
    """Uniform random subset of exactly ceil(keep_fraction * N) points, in original order."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    n = len(cloud)
    m = min(n, math.ceil(keep_fraction * n))
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=m, replace=False))
    labels = None if labeling is None else as_labeling(labeling, n)[keep]
    return cloud.subset(keep), labels


def density_variation(
    cloud: PointCloud,
    labeling,
    plane_normals: Optional[Mapping[int, np.ndarray]] = None,
    spacing: float = 1.0,
    max_shift: float = 0.4,
    seed=0,
) -> PointCloud:
    """Pull points toward evenly spaced planes x = x_min + (i + 1/2) * spacing.

    Each point moves toward its nearest center plane by a uniform distance in
    [0, max_shift], never past it. For a point on a labeled plane the move is
    projected onto that plane, so its perpendicular residual is unchanged;
    NOISE points move along x. ``plane_normals`` maps label to plane normal
    and defaults to planes fitted to the labeling.
    """
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    if not 0 <= max_shift < spacing / 2:
        raise ValueError("max_shift must lie in [0, spacing/2)")
    labels = as_labeling(labeling, len(cloud))
    pts = cloud.points
    if plane_normals is None:
        plane_normals = {k: v[0] for k, v in fit_label_planes(pts, labels).items()}
    rng = np.random.default_rng(seed)
    x = pts[:, 0]
    x0 = x.min() if len(x) else 0.0
    centers = x0 + (np.floor((x - x0) / spacing) + 0.5) * spacing
    gap = centers - x
    step = np.minimum(rng.uniform(0.0, max_shift, size=len(x)), np.abs(gap))
    shift = np.zeros_like(pts)
    shift[:, 0] = np.sign(gap) * step
    for lbl, normal in plane_normals.items():
        sel = labels == lbl
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        v = shift[sel]
        shift[sel] = v - np.outer(v @ n, n)
    return PointCloud(pts + shift, cloud.normals, cloud.id)


def precision_reduction(cloud: PointCloud, max_offset: float = 0.5, seed=0) -> PointCloud:
    """Offset every coordinate by an independent magnitude in [0, max_offset] with random sign."""
    if max_offset < 0:
        raise ValueError("max_offset must be >= 0")
    rng = np.random.default_rng(seed)
    shape = cloud.points.shape
    mag = rng.uniform(0.0, max_offset, size=shape)
    sign = rng.choice(np.array([-1.0, 1.0]), size=shape)
    # normals no longer describe the perturbed surface
    return PointCloud(cloud.points + sign * mag, None, cloud.id)


def corrupt_boundaries(
    cloud: PointCloud,
    index: Optional[NeighborIndex],
    labeling,
    radius: float = 0.5,
    seed=0,
) -> np.ndarray:
    """Swap labels across plane boundaries.

    Candidate pairs are points closer than ``radius`` with distinct non-NOISE
    labels. Pairs are visited in random order and swapped when neither point
    was swapped before, which gives a random maximal set of disjoint swaps.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    labels = as_labeling(labeling, len(cloud)).copy()
    if len(cloud) < 2:
        return labels
    index = index or build_index(cloud)
    pairs = index.pairs_within(radius)
    if pairs.size:
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
        d = np.linalg.norm(cloud.points[pairs[:, 0]] - cloud.points[pairs[:, 1]], axis=1)
        li, lj = labels[pairs[:, 0]], labels[pairs[:, 1]]
        pairs = pairs[(d < radius) & (li != lj) & (li != NOISE) & (lj != NOISE)]
    rng = np.random.default_rng(seed)
    used = np.zeros(len(labels), dtype=bool)
    out = labels.copy()
    for i, j in pairs[rng.permutation(len(pairs))]:
        if used[i] or used[j]:
            continue
        used[i] = used[j] = True
        out[i], out[j] = labels[j], labels[i]
    return out


def apply_operator(
    name: str, cloud: PointCloud, labeling, params: Dict, seed=0
) -> Tuple[PointCloud, Optional[np.ndarray]]:
    """Dispatch one operator by name; returns the (cloud, labeling) pair after it."""
    if name == "downsample":
        return downsample(cloud, labeling, params.get("keep_fraction", 0.5), seed)
    if name == "density":
        if labeling is None:
            raise ValueError("density variation needs a labeling")
        out = density_variation(cloud, labeling, None, params.get("spacing", 1.0),
                                params.get("max_shift", 0.4), seed)
        return out, labeling
    if name == "precision":
        return precision_reduction(cloud, params.get("max_offset", 0.5), seed), labeling
    if name == "boundary":
        if labeling is None:
            raise ValueError("boundary corruption needs a labeling")
        return cloud, corrupt_boundaries(cloud, None, labeling, params.get("swap_radius", 0.5), seed)
    raise ValueError(f"unknown operator {name!r}; expected one of {OPERATORS}")
