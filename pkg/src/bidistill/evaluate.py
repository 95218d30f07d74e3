"""Segmentation metrics, the direct-voting baseline and report serialization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geom import NONE, ViewRender
from .teacher import KnowledgeUnit

UNASSIGNED = -2


class EvalError(ValueError):
    pass


@dataclass
class IoUResult:
    per_part: list[float | None]  # None for parts absent from both pred and gt
    mean: float


def iou_3d(pred, gt, num_parts: int) -> IoUResult:
    """Per-part IoU over points with known ground truth. UNASSIGNED predictions
    count against the union of their ground-truth part."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    keep = gt >= 0
    if not keep.any():
        raise EvalError("no ground truth")
    pred, gt = pred[keep], gt[keep]
    per_part: list[float | None] = []
    for r in range(num_parts):
        p, g = pred == r, gt == r
        union = np.count_nonzero(p | g)
        per_part.append(np.count_nonzero(p & g) / union if union else None)
    defined = [v for v in per_part if v is not None]
    return IoUResult(per_part, float(np.mean(defined)))


@dataclass
class IoU2DTerms:
    view_index: int
    part: int
    intersection: float
    false_positive: float
    missed: float

    @property
    def iou(self) -> float | None:
        denom = self.intersection + self.false_positive + self.missed
        return self.intersection / denom if denom > 0 else None


def iou_2d_terms(views: list[ViewRender], units: list[KnowledgeUnit], gt_labels, num_parts: int,
                 use_rescored=False) -> list[IoU2DTerms]:
    """Confidence-weighted 2D IoU terms per (view, part).

    Intersection sums, over predictions of part r, mean confidence times their
    overlap with the ground-truth pixels of r. False positives are the union of
    those predictions outside the ground truth, weighted by the mean confidence
    of all predictions of r; missed pixels are unweighted.
    """
    gt_labels = np.asarray(gt_labels)
    out = []
    by_view: dict[int, list[KnowledgeUnit]] = {}
    for u in units:
        by_view.setdefault(u.view_index, []).append(u)
    for view in views:
        owner = view.pixel_owner.reshape(-1)
        gt_pix = np.where(owner != NONE, gt_labels[np.maximum(owner, 0)], -1)
        vunits = by_view.get(view.view_index, [])
        for r in range(num_parts):
            truth = gt_pix == r
            preds = [u for u in vunits if u.part == r]
            union = np.zeros_like(truth)
            inter = 0.0
            confs = []
            for u in preds:
                c = u.mean_confidence(use_rescored)
                confs.append(c)
                inter += c * np.count_nonzero(truth[u.pixels])
                union[u.pixels] = True
            fp = (float(np.mean(confs)) if confs else 0.0) * np.count_nonzero(union & ~truth)
            missed = float(np.count_nonzero(truth & ~union))
            out.append(IoU2DTerms(view.view_index, r, inter, fp, missed))
    return out


def miou_2d(views, units, gt_labels, num_parts: int, use_rescored=False) -> float | None:
    ious = [t.iou for t in iou_2d_terms(views, units, gt_labels, num_parts, use_rescored)]
    ious = [v for v in ious if v is not None]
    return float(np.mean(ious)) if ious else None


def coverage(units: list[KnowledgeUnit], num_points: int) -> np.ndarray:
    covered = np.zeros(num_points, dtype=bool)
    for u in units:
        covered |= u.mask
    return covered


def voting_baseline(num_points: int, units: list[KnowledgeUnit], num_parts: int) -> np.ndarray:
    """Plurality of unit argmax labels per point; uncovered points are UNASSIGNED."""
    votes = np.zeros((num_points, num_parts), dtype=np.int64)
    for u in units:
        np.add.at(votes, (u.indices, u.teacher_labels), 1)
    labels = np.argmax(votes, axis=1)
    labels[votes.sum(axis=1) == 0] = UNASSIGNED
    return labels


def propagate_to_faces(point_pred, points, face_centroids, k=5) -> np.ndarray:
    """Majority label of the k nearest points per face; ties go to whichever tied
    label owns the nearest point."""
    point_pred = np.asarray(point_pred)
    k = min(k, len(point_pred))
    _, nn = cKDTree(np.asarray(points)).query(np.asarray(face_centroids).reshape(-1, 3), k=k)
    nn = nn.reshape(len(nn), -1)
    out = np.empty(len(nn), dtype=point_pred.dtype)
    for f, row in enumerate(nn):
        labels = point_pred[row]  # sorted nearest first
        values, counts = np.unique(labels, return_counts=True)
        tied = set(values[counts == counts.max()].tolist())
        out[f] = next(lab for lab in labels if lab in tied)
    return out


@dataclass
class MetricsReport:
    per_part_iou_3d: list[float | None]
    miou_3d: float
    part_names: list[str] = field(default_factory=list)
    baseline_miou_3d: float | None = None
    baseline_per_part_iou_3d: list[float | None] | None = None
    miou_2d: float | None = None
    miou_2d_rescored: float | None = None
    per_view_part_iou_2d: list[dict] | None = None
    uncovered_count: int | None = None
    uncovered_accuracy: float | None = None
    exclude_uncovered: bool = False
    num_shapes: int = 1
    trigger_epoch: int | None = None
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def to_dict(self) -> dict:
        return _drop_empty(asdict(self))


def _drop_empty(obj):
    if isinstance(obj, dict):
        return {k: _drop_empty(v) for k, v in obj.items() if v is not None and v != {} and v != []}
    if isinstance(obj, list):
        return [_drop_empty(v) for v in obj]
    return obj


def report_json(report: MetricsReport | dict) -> str:
    data = report.to_dict() if isinstance(report, MetricsReport) else report
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def write_report(report: MetricsReport | dict, path) -> Path:
    path = Path(path)
    try:
        path.write_text(report_json(report), encoding="utf-8")
    except OSError as exc:
        raise EvalError(f"cannot write report to {path}: {exc}") from exc
    return path


@dataclass
class CorpusScores:
    miou: float
    per_part: list[float | None]
    per_shape: list[float]


def corpus_iou(preds: list, gts: list, num_parts: int) -> CorpusScores:
    """Shape-averaged mIoU; per-part IoU is averaged over shapes where defined."""
    results = [iou_3d(p, g, num_parts) for p, g in zip(preds, gts)]
    per_part = []
    for r in range(num_parts):
        vals = [res.per_part[r] for res in results if res.per_part[r] is not None]
        per_part.append(float(np.mean(vals)) if vals else None)
    per_shape = [res.mean for res in results]
    return CorpusScores(float(np.mean(per_shape)), per_part, per_shape)


def exclude_uncovered(pred, covered) -> np.ndarray:
    return np.where(covered, pred, UNASSIGNED)
