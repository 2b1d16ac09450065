"""Postprocessing of an instance labeling: plane completion and boundary refinement.

The labeling may come from the built-in region-growing segmenter or from an
external predictor (label file). Completion segments planes missed in the
NOISE set with region-growing thresholds inferred from the planes that are
already there; refinement then reassigns boundary points by composite
distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .cloud_io import NOISE, PointCloud, as_labeling
from .config import RunConfig
from .geometry import (
    DEFAULT_LAMBDA,
    GeometryError,
    NeighborIndex,
    build_index,
    estimate_normals,
    fit_plane,
)
from .superpoints import (
    DEFAULT_K_BOUNDARY,
    GrowthParams,
    refine_boundaries,
    region_grow,
    segment_coarse,
)

logger = logging.getLogger(__name__)

DIST_FLOOR = 0.01
NORM_FLOOR = 0.02


class InferenceError(ValueError):
    pass


# ---------------------------------------------------------------- score fusion


def fuse_scores(s, ms):
    """Geometric mean of the IoU-aware score and the mask confidence."""
    s = np.asarray(s, dtype=np.float64)
    ms = np.asarray(ms, dtype=np.float64)
    if not (np.all((s >= 0) & (s <= 1)) and np.all((ms >= 0) & (ms <= 1))):
        raise ValueError("scores must lie in [0, 1]")
    fused = np.sqrt(s * ms)
    return float(fused) if fused.ndim == 0 else fused


@dataclass
class ScoredInstance:
    id: int
    s: float
    ms: float

    @property
    def fused(self) -> float:
        return fuse_scores(self.s, self.ms)


def rank_instances(instances) -> list:
    """Instances sorted by fused score, highest first (ties by id)."""
    return sorted(instances, key=lambda inst: (-inst.fused, inst.id))


def load_scores(path) -> Dict[int, ScoredInstance]:
    """Read an ``id S mS`` sidecar file."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise ValueError(f"{path}: line {lineno}: expected 'id S mS'")
        inst = ScoredInstance(int(parts[0]), float(parts[1]), float(parts[2]))
        inst.fused  # range check
        out[inst.id] = inst
    return out


def save_scores(path, instances) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(f"{int(inst.id)} {float(inst.s)!r} {float(inst.ms)!r}\n")


def filter_by_score(labeling, scores: Dict[int, ScoredInstance], min_fused: float) -> np.ndarray:
    """Dissolve instances whose fused score is below ``min_fused``; unscored instances keep fused = 1."""
    labels = as_labeling(labeling).copy()
    for inst_id, inst in scores.items():
        if inst.fused < min_fused:
            labels[labels == inst_id] = NOISE
    return labels


# ---------------------------------------------------------------- completion


def infer_growth_params(
    cloud: PointCloud,
    normals: np.ndarray,
    labeling,
    base: Optional[GrowthParams] = None,
    dist_floor: float = DIST_FLOOR,
    norm_floor: float = NORM_FLOOR,
) -> GrowthParams:
    """Region-growing thresholds that would have admitted every existing instance.

    For each instance the plane is fitted and the largest member distance and
    normal cosine distance are measured; the maxima over instances become the
    thresholds (never below the floors). Neighborhood size and minimum region
    size are taken from ``base``.
    """
    base = base or GrowthParams()
    labels = as_labeling(labeling, len(cloud))
    t_dist, t_norm, used = 0.0, 0.0, 0
    for lbl in np.unique(labels[labels != NOISE]):
        members = np.flatnonzero(labels == lbl)
        if members.size < 3:
            continue
        try:
            plane = fit_plane(cloud, members, normals)
        except GeometryError:
            continue
        used += 1
        t_dist = max(t_dist, plane.t_dist)
        t_norm = max(t_norm, plane.t_norm or 0.0)
    if not used:
        raise InferenceError("cannot infer parameters: no instance with a usable plane")
    return GrowthParams(
        t_dist=max(t_dist, dist_floor),
        t_norm=min(1.0, max(t_norm, norm_floor)),
        k_growth=base.k_growth,
        min_region=base.min_region,
        refit_period=base.refit_period,
        min_width=base.min_width,
    ).validate()


@dataclass
class CompletionInfo:
    status: str  # "ok" | "skipped"
    params: Optional[GrowthParams] = None
    dissolved: list = field(default_factory=list)
    added: list = field(default_factory=list)
    message: str = ""


def complete_planes(
    cloud: PointCloud,
    index: NeighborIndex,
    normals: np.ndarray,
    labeling,
    min_points: int = 10,
    base: Optional[GrowthParams] = None,
    dist_floor: float = DIST_FLOOR,
    norm_floor: float = NORM_FLOOR,
    return_info: bool = False,
):
    """Recover planes missing from a labeling.

    Instances with fewer than ``min_points`` members are dissolved to NOISE as
    likely false detections. Region growing then runs on the NOISE points
    only, with thresholds inferred from the surviving instances; new regions
    get fresh ids above the existing ones. Existing instances keep exactly
    their members.
    """
    labels = as_labeling(labeling, len(cloud)).copy()
    ids, counts = np.unique(labels[labels != NOISE], return_counts=True)
    small = ids[counts < min_points]
    if small.size:
        labels[np.isin(labels, small)] = NOISE
    info = CompletionInfo("ok", dissolved=small.tolist())
    try:
        params = infer_growth_params(cloud, normals, labels, base, dist_floor, norm_floor)
    except InferenceError as exc:
        logger.warning("plane completion skipped: %s", exc)
        info = CompletionInfo("skipped", message=str(exc))
        out = as_labeling(labeling, len(cloud)).copy()
        return (out, info) if return_info else out
    info.params = params

    noise = labels == NOISE
    if noise.any():
        grown = region_grow(cloud, index, normals, params, candidate_mask=noise)
        next_id = int(labels.max(initial=NOISE)) + 1
        for new in np.unique(grown[grown != NOISE]):
            labels[grown == new] = next_id
            info.added.append(next_id)
            next_id += 1
    return (labels, info) if return_info else labels


# ---------------------------------------------------------------- refinement


def refine_boundaries_fast(
    cloud: PointCloud,
    index: NeighborIndex,
    normals: np.ndarray,
    labeling,
    lam: float = DEFAULT_LAMBDA,
    k_b: int = DEFAULT_K_BOUNDARY,
    noise_gate: Optional[float] = None,
    planes=None,
) -> np.ndarray:
    """Single pass of boundary reassignment against planes fitted once from the input.

    Suited to labelings whose plane bodies are already right, e.g. network
    predictions after completion. ``planes`` reuses an earlier plane fit.
    """
    return refine_boundaries(cloud, index, normals, labeling, lam, k_b, iters=1,
                             refit=False, noise_gate=noise_gate, planes=planes)


# ---------------------------------------------------------------- pipeline


@dataclass
class PipelineResult:
    labels: np.ndarray
    stages: Dict[str, np.ndarray]
    completion: Optional[CompletionInfo] = None


def pipeline(
    cloud: PointCloud,
    config: Optional[RunConfig] = None,
    labels=None,
    index: Optional[NeighborIndex] = None,
    normals: Optional[np.ndarray] = None,
) -> PipelineResult:
    """Segment (or take ``labels``), complete missing planes, refine boundaries.

    ``stages`` holds the ``raw``, ``completed`` and ``refined`` labelings.
    """
    cfg = (config or RunConfig()).validate()
    if index is None:
        index = build_index(cloud)
    if normals is None:
        normals = cloud.normals if cloud.normals is not None else estimate_normals(cloud, index, cfg.k_normals)
    gate = cfg.noise_gate if cfg.noise_gate > 0 else None
    growth = cfg.growth_params()

    if labels is None:
        raw = segment_coarse(cloud, index, normals, growth, cfg.lam, cfg.k_boundary,
                             cfg.local_iters, noise_gate=cfg.noise_gate, k_normals=cfg.k_normals)
    else:
        raw = as_labeling(labels, len(cloud))
    completed, info = complete_planes(cloud, index, normals, raw, cfg.min_points, growth,
                                      cfg.dist_floor, cfg.norm_floor, return_info=True)
    refined = refine_boundaries_fast(cloud, index, normals, completed, cfg.lam,
                                     cfg.k_boundary, noise_gate=gate)
    return PipelineResult(refined, {"raw": raw, "completed": completed, "refined": refined}, info)
