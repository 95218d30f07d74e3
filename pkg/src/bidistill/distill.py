"""Forward distillation loss, backward re-scoring and the alignment loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geom import PointCloudShape
from .student import DistillHead, EncoderConfig, StudentModel, adam_step, head_backward, head_forward
from .teacher import KnowledgeUnit

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
WEIGHT_CLAMP = (0.1, 10.0)


class DistillError(ValueError):
    pass


class Mode(str, Enum):
    PRE = "pre"
    TTA = "tta"


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 25
    lr: float = 0.001
    batch_size_shapes: int = 16
    tau: float = 0.01
    mode: Mode = Mode.PRE
    backward_distillation: bool = True
    seed: int = 0
    few_shot_weight: float = 0.0
    # after re-scoring, rescale part weights so every part keeps its phase-1
    # confidence mass (off by default: phase-2 weights normally stay fixed)
    preserve_part_mass: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise DistillError("epochs must be >= 1")
        if self.tau <= 0:
            raise DistillError("tau must be positive")
        if self.batch_size_shapes < 1:
            raise DistillError("batch size must be >= 1")
        if self.few_shot_weight < 0:
            raise DistillError("few_shot_weight must be >= 0")


@dataclass
class ConvergenceTracker:
    history: list[float] = field(default_factory=list)
    triggered: bool = False
    trigger_epoch: int | None = None


@dataclass
class AlignmentResult:
    model: StudentModel
    units: dict[str, list[KnowledgeUnit]]
    trigger_epoch: int | None
    final_probs: dict[str, np.ndarray]
    history: list[tuple[int, float, int]]  # (epoch, mean loss, phase)
    part_weights: np.ndarray
    warnings: list[str] = field(default_factory=list)


def class_balance_weights(units: list[KnowledgeUnit], num_parts: int, few_shot_labels=None
                          ) -> np.ndarray:
    """Inverse-frequency part weights from teacher pseudo-labels.

    Absent parts get weight 1; present parts are clamped to [0.1, 10] and then
    rescaled to mean 1 among themselves.
    """
    counts = np.zeros(num_parts)
    for unit in units:
        counts += np.bincount(unit.teacher_labels, minlength=num_parts)
    for labels in few_shot_labels or ():
        labels = np.asarray(labels)
        counts += np.bincount(labels[labels >= 0], minlength=num_parts)
    weights = np.ones(num_parts)
    present = counts > 0
    if present.any():
        raw = counts.sum() / (num_parts * counts[present])
        raw = np.clip(raw, *WEIGHT_CLAMP)
        weights[present] = raw / raw.mean()
    return weights


@dataclass
class _Targets:
    """Flattened (unit, point) terms of the masked loss for one shape."""

    points: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    inv_size: np.ndarray
    unit_of: np.ndarray

    @classmethod
    def build(cls, units: list[KnowledgeUnit], use_rescored: bool) -> "_Targets":
        if not units:
            e = np.zeros(0, dtype=np.int64)
            return cls(e, e, np.zeros(0), np.zeros(0), e)
        conf = []
        for u in units:
            if use_rescored:
                if u.rescored_confidence is None:
                    raise DistillError(f"unit {u.unit_index} has no re-scored confidence")
                conf.append(np.full(u.size, float(u.rescored_confidence)))
            else:
                conf.append(u.confidence)
        return cls(
            points=np.concatenate([u.indices for u in units]),
            labels=np.concatenate([u.teacher_labels for u in units]),
            confidence=np.concatenate(conf),
            inv_size=np.concatenate([np.full(u.size, 1.0 / u.size) for u in units]),
            unit_of=np.concatenate([np.full(u.size, k) for k, u in enumerate(units)]),
        )


def _masked_loss(probs, targets: _Targets, part_weights):
    grad = np.zeros_like(probs)
    if len(targets.points) == 0:
        return 0.0, grad
    coef = np.asarray(part_weights)[targets.labels] * targets.confidence * targets.inv_size
    p = probs[targets.points, targets.labels]
    clamped = p < LOG_FLOOR
    loss = -float(np.sum(coef * np.log(np.maximum(p, LOG_FLOOR))))
    g = np.where(clamped, 0.0, -coef / np.where(clamped, 1.0, p))
    np.add.at(grad, (targets.points, targets.labels), g)
    return loss, grad


def _part_mass(targets: list[_Targets], num_parts: int) -> np.ndarray:
    mass = np.zeros(num_parts)
    for t in targets:
        mass += np.bincount(t.labels, t.confidence * t.inv_size, minlength=num_parts)
    return mass


def distill_loss_and_grad(probs: np.ndarray, units: list[KnowledgeUnit], part_weights,
                          use_rescored=False) -> tuple[float, np.ndarray]:
    """Masked, confidence-weighted cross-entropy against the teacher's argmax.

    Each unit contributes the mean over its points of ``w_r * c * -log p_r`` where
    ``r`` is the teacher argmax and ``c`` either the per-point teacher confidence or
    the unit's re-scored confidence. Returns the loss and its gradient w.r.t.
    ``probs``; logs are floored at 1e-12 (zero gradient in the floored region).
    """
    return _masked_loss(np.asarray(probs, dtype=np.float64),
                        _Targets.build(units, use_rescored), part_weights)


def supervised_loss(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    grad = np.zeros_like(probs)
    idx = np.flatnonzero(labels >= 0)
    if len(idx) == 0:
        return 0.0, grad
    p = probs[idx, labels[idx]]
    clamped = p < LOG_FLOOR
    loss = -float(np.mean(np.log(np.maximum(p, LOG_FLOOR))))
    grad[idx, labels[idx]] = np.where(clamped, 0.0, -1.0 / (len(idx) * np.where(clamped, 1.0, p)))
    return loss, grad


def convergence_update(tracker: ConvergenceTracker, epoch_mean_loss: float, tau: float) -> bool:
    """Record one epoch; returns True only on the epoch the trigger first fires."""
    if not np.isfinite(epoch_mean_loss) or epoch_mean_loss < 0:
        raise DistillError(f"invalid epoch loss {epoch_mean_loss}")
    tracker.history.append(float(epoch_mean_loss))
    if tracker.triggered or len(tracker.history) < 2:
        return False
    prev, cur = tracker.history[-2], tracker.history[-1]
    if abs(cur - prev) / max(prev, 1e-12) < tau:
        tracker.triggered = True
        tracker.trigger_epoch = len(tracker.history)
        return True
    return False


def backward_rescore(unit: KnowledgeUnit, student_probs: np.ndarray) -> float:
    """Fraction of the unit's points where teacher and student argmax agree.

    The score is stored on the unit and returned.
    """
    student = np.argmax(np.asarray(student_probs)[unit.indices], axis=1)
    score = float(np.count_nonzero(student == unit.teacher_labels)) / unit.size
    unit.rescored_confidence = score
    return score


def predict_labels(model: StudentModel, shape: PointCloudShape) -> np.ndarray:
    return np.argmax(model.predict_probs(shape), axis=1)


def run_alignment(corpus: list[PointCloudShape], teacher_units: dict[str, list[KnowledgeUnit]],
                  config: DistillConfig = DistillConfig(), encoder: EncoderConfig = EncoderConfig(),
                  features: dict[str, np.ndarray] | None = None,
                  few_shot_labels: dict[str, np.ndarray] | None = None,
                  hidden=(128, 128, 64)) -> AlignmentResult:
    """Train the distillation head on teacher knowledge, re-score the knowledge
    once the epoch loss settles, and finish training on the re-scored units.

    ``teacher_units`` maps shape ids to their knowledge units; units are updated
    in place with their re-scored confidences. ``features`` optionally supplies
    precomputed per-shape encoder outputs.
    """
    if not corpus:
        raise DistillError("empty corpus")
    if config.mode == Mode.TTA and len(corpus) != 1:
        raise DistillError("test-time alignment runs on exactly one shape")
    ids = [s.shape_id for s in corpus]
    if len(set(ids)) != len(ids):
        raise DistillError("duplicate shape ids in corpus")
    num_parts = corpus[0].num_parts
    if any(s.num_parts != num_parts for s in corpus):
        raise DistillError("all shapes must share one part list")

    model = StudentModel(encoder, head=None)
    feats = []
    for shape in corpus:
        if features is not None and shape.shape_id in features:
            model.set_features(shape.shape_id, features[shape.shape_id])
        feats.append(model.encode(shape))
        if feats[-1].shape[0] != shape.num_points:
            raise DistillError(f"{shape.shape_id}: feature rows do not match point count")
    dim = feats[0].shape[1]
    model.head = DistillHead.create(dim, num_parts, hidden, seed=config.seed)

    units = [teacher_units.get(sid, []) for sid in ids]
    for shape, us in zip(corpus, units):
        for u in us:
            u.rescored_confidence = None
            if len(u.mask) != shape.num_points:
                raise DistillError(f"{shape.shape_id}: unit mask does not match point count")
    few = few_shot_labels or {}
    fs_weight = config.few_shot_weight
    if few and fs_weight == 0:
        fs_weight = 1.0
    weights = class_balance_weights([u for us in units for u in us], num_parts,
                                    [few[s] for s in ids if s in few])

    targets = [_Targets.build(us, False) for us in units]
    tracker = ConvergenceTracker()
    history: list[tuple[int, float, int]] = []
    warnings: list[str] = []
    phase = 1
    head = model.head

    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(corpus))
        losses = np.zeros(len(corpus))
        for start in range(0, len(order), config.batch_size_shapes):
            batch = np.sort(order[start:start + config.batch_size_shapes])
            total = [np.zeros_like(p) for p in head.params]
            for k in batch:
                probs, acts = head_forward(head, feats[k], return_cache=True)
                loss, grad = _masked_loss(probs, targets[k], weights)
                if ids[k] in few:
                    fl, fg = supervised_loss(probs, few[ids[k]])
                    loss += fs_weight * fl
                    grad += fs_weight * fg
                losses[k] = loss
                if not grad.any():
                    continue
                for acc, g in zip(total, head_backward(head, acts, probs, grad)):
                    acc += g
            adam_step(head, [g / len(batch) for g in total], config.lr)
        mean_loss = float(losses.mean())
        history.append((epoch, mean_loss, phase))
        log.debug("epoch %d phase %d loss %.6f", epoch, phase, mean_loss)
        if phase == 1 and convergence_update(tracker, mean_loss, config.tau) \
                and config.backward_distillation:
            for k, us in enumerate(units):
                snapshot = head_forward(head, feats[k])
                for u in us:
                    backward_rescore(u, snapshot)
            before = _part_mass(targets, num_parts)
            targets = [_Targets.build(us, True) for us in units]
            if config.preserve_part_mass:
                after = _part_mass(targets, num_parts)
                weights = np.where(after > 0, weights * before / np.maximum(after, 1e-300), weights)
            phase = 2

    if config.backward_distillation and not tracker.triggered:
        warnings.append("loss never settled below tau; backward distillation skipped")
        log.warning(warnings[-1])

    final = {sid: head_forward(head, f) for sid, f in zip(ids, feats)}
    return AlignmentResult(model=model, units=dict(zip(ids, units)),
                           trigger_epoch=tracker.trigger_epoch, final_probs=final,
                           history=history, part_weights=weights, warnings=warnings)


def write_loss_csv(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,phase\n")
        for epoch, loss, phase in history:
            fh.write(f"{epoch},{loss!r},{phase}\n")
