"""Instance segmentation metrics: coverage, weighted coverage, precision/recall/F1, accuracy.

NOISE points (label -1) never form an instance. They are ignored by the
instance-level metrics and count as correct in ``point_accuracy`` only when
both labelings mark them NOISE.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cloud_io import NOISE

DEFAULT_IOU_THRESHOLD = 0.5
METRIC_NAMES = ("cov", "wcov", "precision", "recall", "f1", "accuracy")


def iou(set_a, set_b) -> float:
    """Intersection over union of two point-index sets; 0 when both are empty."""
    a, b = set(np.asarray(list(set_a)).tolist()), set(np.asarray(list(set_b)).tolist())
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def _overlaps(gt, pred):
    """Instance ids, sizes and the intersection-count matrix (G x P)."""
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gt.shape != pred.shape:
        raise ValueError(f"labelings differ in length: {gt.shape[0]} vs {pred.shape[0]}")
    g_ids, g_inv, g_sizes = np.unique(gt, return_inverse=True, return_counts=True)
    p_ids, p_inv, p_sizes = np.unique(pred, return_inverse=True, return_counts=True)
    inter = np.zeros((g_ids.size, p_ids.size), dtype=np.int64)
    np.add.at(inter, (g_inv, p_inv), 1)
    g_keep = g_ids != NOISE
    p_keep = p_ids != NOISE
    return (g_ids[g_keep], p_ids[p_keep], g_sizes[g_keep], p_sizes[p_keep],
            inter[np.ix_(g_keep, p_keep)])


def _iou_matrix(g_sizes, p_sizes, inter):
    union = g_sizes[:, None] + p_sizes[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def coverage(gt, pred) -> Tuple[float, float]:
    """Mean (cov) and size-weighted mean (wcov) over ground-truth instances of the best IoU."""
    _, _, gs, ps, inter = _overlaps(gt, pred)
    if gs.size == 0:
        return 0.0, 0.0
    best = _iou_matrix(gs, ps, inter).max(axis=1) if ps.size else np.zeros(gs.size)
    return float(best.mean()), float(np.sum(best * gs) / gs.sum())


def match_instances(gt, pred, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> List[Tuple[int, int, float]]:
    """Greedy one-to-one matching in descending IoU order.

    A pair qualifies when its IoU is positive and at least ``iou_threshold``.
    Ties are broken by ground-truth id, then predicted id. Returns
    ``(gt_id, pred_id, iou)`` triples.
    """
    g_ids, p_ids, gs, ps, inter = _overlaps(gt, pred)
    ious = _iou_matrix(gs, ps, inter)
    gi, pi = np.nonzero((ious >= iou_threshold) & (inter > 0))
    order = np.lexsort((p_ids[pi], g_ids[gi], -ious[gi, pi]))
    used_g, used_p = set(), set()
    matches = []
    for o in order:
        g, p = int(gi[o]), int(pi[o])
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        matches.append((int(g_ids[g]), int(p_ids[p]), float(ious[g, p])))
    return matches


def instance_prf(gt, pred, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> Tuple[float, float, float]:
    n_gt = np.unique(np.asarray(gt)[np.asarray(gt) != NOISE]).size
    n_pred = np.unique(np.asarray(pred)[np.asarray(pred) != NOISE]).size
    m = len(match_instances(gt, pred, iou_threshold))
    precision = m / n_pred if n_pred else 0.0
    recall = m / n_gt if n_gt else 0.0
    return precision, recall, f1_score(precision, recall)


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


def point_accuracy(gt, pred) -> float:
    """Fraction of correctly labeled points under the best instance correspondence.

    Instances are put in one-to-one correspondence so that the number of
    points whose predicted instance corresponds to their ground-truth
    instance is maximal; points that are NOISE in both labelings are correct
    as well.
    """
    gt = np.asarray(gt)
    if gt.size == 0:
        return 0.0
    _, _, _, _, inter = _overlaps(gt, pred)
    correct = int(np.sum((gt == NOISE) & (np.asarray(pred) == NOISE)))
    if inter.size:
        rows, cols = linear_sum_assignment(inter, maximize=True)
        correct += int(inter[rows, cols].sum())
    return correct / gt.size


@dataclass
class EvalReport:
    sample_id: str
    cov: float
    wcov: float
    precision: float
    recall: float
    f1: float
    accuracy: float
    matches: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(gt, pred, sample_id: str = "", iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> EvalReport:
    cov, wcov = coverage(gt, pred)
    p, r, f1 = instance_prf(gt, pred, iou_threshold)
    matches = [{"gt": g, "pred": q, "iou": v} for g, q, v in match_instances(gt, pred, iou_threshold)]
    return EvalReport(sample_id, cov, wcov, p, r, f1, point_accuracy(gt, pred), matches)


def aggregate(reports: Sequence[EvalReport]) -> dict:
    """Mean of every metric over samples."""
    if not reports:
        return {name: 0.0 for name in METRIC_NAMES} | {"n_samples": 0}
    out = {name: float(np.mean([getattr(r, name) for r in reports])) for name in METRIC_NAMES}
    out["n_samples"] = len(reports)
    return out
