"""2D teacher predictions and their conversion into 3D knowledge units."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geom import NONE, PointCloudShape, ViewRender, back_project, region_mask

BACKGROUND = -1
SIMPLEX_TOL = 1e-6
FILE_SIMPLEX_TOL = 1e-3
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class TeacherError(ValueError):
    pass


class TeacherKind(str, Enum):
    BOX = "box"
    PIXEL = "pixel"


@dataclass
class BoxPrediction:
    view_index: int
    rect: tuple[int, int, int, int]  # x1, y1, x2, y2; half-open, x along columns
    probs: np.ndarray

    def __post_init__(self):
        self.probs = _check_simplex(self.probs, SIMPLEX_TOL)
        x1, y1, x2, y2 = self.rect
        if not (x1 < x2 and y1 < y2):
            raise TeacherError(f"degenerate box {self.rect}")


@dataclass
class PixelPredictionMap:
    view_index: int
    probs: np.ndarray  # (H, W, R)
    background: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=bool)
        fg = self.probs[~self.background]
        if len(fg) and (np.abs(fg.sum(-1) - 1.0) > SIMPLEX_TOL).any():
            raise TeacherError("probs not normalized")

    def argmax_map(self) -> np.ndarray:
        amap = np.argmax(self.probs, axis=-1)
        amap[self.background] = BACKGROUND
        return amap


@dataclass
class SegComponent:
    part_index: int
    rows: np.ndarray
    cols: np.ndarray

    @property
    def size(self) -> int:
        return len(self.rows)


@dataclass
class KnowledgeUnit:
    """Back-projected teacher prediction.

    ``mask`` selects the covered points, ``probs`` holds one R-vector per covered
    point (in ascending point order) and ``confidence`` their row maxima. The 2D
    footprint (``view_index``, ``pixels`` as flat indices of foreground pixels) is
    kept so the prediction can be scored against 2D ground truth.
    """

    shape_id: str
    unit_index: int
    mask: np.ndarray
    probs: np.ndarray
    view_index: int = -1
    pixels: np.ndarray | None = None
    rescored_confidence: float | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(int(self.mask.sum()), -1)
        if not self.mask.any():
            raise TeacherError("knowledge unit with empty mask")

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def size(self) -> int:
        return len(self.probs)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def teacher_labels(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest part on ties
        return np.argmax(self.probs, axis=1)

    @property
    def part(self) -> int:
        """Dominant teacher part of the unit (plurality of per-point argmax)."""
        return int(np.argmax(np.bincount(self.teacher_labels)))

    def mean_confidence(self, use_rescored=False) -> float:
        if use_rescored:
            if self.rescored_confidence is None:
                raise TeacherError(f"unit {self.unit_index} has not been re-scored")
            return float(self.rescored_confidence)
        return float(self.confidence.mean())


@dataclass(frozen=True)
class MockTeacherConfig:
    kind: TeacherKind = TeacherKind.BOX
    drop_rate: float = 0.0
    flip_rate: float = 0.0
    confidence_range: tuple[float, float] = (1.0, 1.0)
    box_jitter: int = 0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.confidence_range
        if not 0 < lo <= hi <= 1:
            raise TeacherError("confidence_range must satisfy 0 < lo <= hi <= 1")
        for name in ("drop_rate", "flip_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise TeacherError(f"{name} must lie in [0, 1]")


def _check_simplex(probs, tol) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if (probs < 0).any() or abs(probs.sum() - 1.0) > tol:
        raise TeacherError("probs not normalized")
    return probs


def connected_components(argmax_map) -> list[SegComponent]:
    """Maximal 4-connected same-part regions, background (-1) excluded.

    Components are ordered by their first pixel in row-major order.
    """
    amap = np.asarray(argmax_map)
    comps = []
    for part in np.unique(amap[amap != BACKGROUND]):
        lab, count = ndimage.label(amap == part, structure=_FOUR_CONNECTED)
        for k in range(1, count + 1):
            rows, cols = np.nonzero(lab == k)
            comps.append(SegComponent(int(part), rows, cols))
    w = amap.shape[1] if amap.ndim == 2 else 1
    comps.sort(key=lambda c: c.rows[0] * w + c.cols[0])
    return comps


def _check_view(index, views):
    if not 0 <= index < len(views):
        raise TeacherError(f"prediction references view {index} but only {len(views)} exist")


def extract_knowledge(shape_id: str, views: list[ViewRender], predictions, num_points: int
                      ) -> list[KnowledgeUnit]:
    """Back-project boxes or per-pixel maps into knowledge units.

    Boxes give one unit each with the box's probabilities on every covered point.
    Pixel maps are split into connected components; a point owning several
    pixels of a component receives the mean of their probability vectors.
    Units whose footprint covers no rendered point are dropped.
    """
    units: list[KnowledgeUnit] = []

    def add(mask, probs, view_index, pixels):
        units.append(KnowledgeUnit(shape_id, len(units), mask, probs, view_index, pixels))

    for pred in predictions:
        _check_view(pred.view_index, views)
        view = views[pred.view_index]
        h, w = view.image_size
        if isinstance(pred, BoxPrediction):
            region = region_mask((h, w), rect=pred.rect)
            mask = back_project(view, region, num_points)
            if not mask.any():
                continue
            pixels = np.flatnonzero(region & (view.pixel_owner != NONE))
            add(mask, np.tile(pred.probs, (int(mask.sum()), 1)), pred.view_index, pixels)
        elif isinstance(pred, PixelPredictionMap):
            for comp in connected_components(pred.argmax_map()):
                owners = view.pixel_owner[comp.rows, comp.cols]
                keep = owners != NONE
                if not keep.any():
                    continue
                owners = owners[keep]
                vecs = pred.probs[comp.rows[keep], comp.cols[keep]]
                r = vecs.shape[1]
                sums = np.zeros((num_points, r))
                np.add.at(sums, owners, vecs)
                counts = np.bincount(owners, minlength=num_points)
                mask = counts > 0
                add(mask, sums[mask] / counts[mask, None], pred.view_index,
                    comp.rows[keep] * w + comp.cols[keep])
        else:
            raise TeacherError(f"unsupported prediction type {type(pred).__name__}")
    return units


def _skewed_probs(part: int, num_parts: int, top: float) -> np.ndarray:
    probs = np.full(num_parts, (1.0 - top) / (num_parts - 1))
    probs[part] = top
    return probs


def mock_vlm_predict(shape: PointCloudShape, views: list[ViewRender], config: MockTeacherConfig):
    """Synthetic teacher built from ground-truth labels plus seeded noise.

    Every view draws from its own generator seeded by ``(config.seed, view_index)``,
    so views can be processed in any order with identical results.
    """
    if not shape.fully_labeled:
        raise TeacherError("mock teacher requires a fully labeled shape")
    r = shape.num_parts
    lo, hi = config.confidence_range
    out = []
    for view in views:
        rng = np.random.default_rng([config.seed, view.view_index])
        owner = view.pixel_owner
        h, w = owner.shape
        part_map = np.where(owner != NONE, shape.labels[np.maximum(owner, 0)], BACKGROUND)
        if config.kind == TeacherKind.BOX:
            for part in range(r):
                rows, cols = np.nonzero(part_map == part)
                if len(rows) == 0:
                    continue
                jit = rng.integers(-config.box_jitter, config.box_jitter + 1, size=4)
                drop, flip = rng.random(), rng.random()
                wrong = int(rng.integers(r - 1))
                top = rng.uniform(lo, hi)
                if drop < config.drop_rate:
                    continue
                x1 = int(np.clip(cols.min() + jit[0], 0, w - 1))
                y1 = int(np.clip(rows.min() + jit[1], 0, h - 1))
                x2 = int(np.clip(cols.max() + 1 + jit[2], x1 + 1, w))
                y2 = int(np.clip(rows.max() + 1 + jit[3], y1 + 1, h))
                label = part
                if flip < config.flip_rate:
                    label = wrong if wrong < part else wrong + 1
                out.append(BoxPrediction(view.view_index, (x1, y1, x2, y2),
                                         _skewed_probs(label, r, top)))
        else:
            fg = part_map != BACKGROUND
            # drop whole parts per view, flip and score individual pixels
            dropped = rng.random(r) < config.drop_rate
            flips = rng.random((h, w)) < config.flip_rate
            wrong = rng.integers(r - 1, size=(h, w))
            tops = rng.uniform(lo, hi, size=(h, w))
            labels = np.where(flips, np.where(wrong < part_map, wrong, wrong + 1), part_map)
            background = ~fg | dropped[np.maximum(part_map, 0)]
            probs = np.broadcast_to(((1.0 - tops) / (r - 1))[..., None], (h, w, r)).copy()
            safe = np.maximum(labels, 0)
            np.put_along_axis(probs, safe[..., None], tops[..., None], axis=-1)
            probs[background] = 1.0 / r
            if background.all():
                continue
            out.append(PixelPredictionMap(view.view_index, probs, background))
    return out


def _rle_encode(flat_indices: np.ndarray) -> list[int]:
    idx = np.sort(np.asarray(flat_indices, dtype=np.int64))
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) != 1) + 1
    starts = np.concatenate([[0], breaks])
    ends = np.concatenate([breaks, [len(idx)]])
    out = []
    for s, e in zip(starts, ends):
        out += [int(idx[s]), int(e - s)]
    return out


def _rle_decode(rle) -> np.ndarray:
    if len(rle) % 2:
        raise TeacherError("pixels_rle must hold start,len pairs")
    parts = [np.arange(s, s + n) for s, n in zip(rle[::2], rle[1::2])]
    return np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, np.int64)


def dump_predictions(predictions, path) -> None:
    """Write predictions as NDJSON. Pixel maps are flattened to one record per
    (component part) with the mean probability vector of its pixels."""
    lines = []
    for pred in predictions:
        if isinstance(pred, BoxPrediction):
            rec = {"kind": "box", "view": pred.view_index, "rect": [int(v) for v in pred.rect],
                   "probs": [float(p) for p in pred.probs]}
            lines.append(json.dumps(rec))
        else:
            amap = pred.argmax_map()
            w = amap.shape[1]
            for part in np.unique(amap[amap != BACKGROUND]):
                rows, cols = np.nonzero(amap == part)
                probs = pred.probs[rows, cols].mean(axis=0)
                rec = {"kind": "pixel", "view": pred.view_index, "part": int(part),
                       "pixels_rle": _rle_encode(rows * w + cols),
                       "probs": [float(p) for p in probs / probs.sum()]}
                lines.append(json.dumps(rec))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_predictions(path, image_size=None, num_parts=None):
    """Parse prediction NDJSON. Pixel records need ``image_size`` to build maps;
    records of one view are merged into a single prediction map."""
    kinds = set()
    boxes, pixel_recs = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TeacherError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            kind = rec.get("kind")
            if kind not in ("box", "pixel"):
                raise TeacherError(f"line {lineno}: unknown kind {kind!r}")
            kinds.add(kind)
            if len(kinds) > 1:
                raise TeacherError(f"line {lineno}: mixed prediction kinds")
            try:
                probs = _check_simplex(rec["probs"], FILE_SIMPLEX_TOL)
                probs = probs / probs.sum()
                view = int(rec["view"])
            except KeyError as exc:
                raise TeacherError(f"line {lineno}: missing field {exc}") from None
            except TeacherError as exc:
                raise TeacherError(f"line {lineno}: {exc}") from None
            if num_parts is not None and len(probs) != num_parts:
                raise TeacherError(f"line {lineno}: expected {num_parts} probs, got {len(probs)}")
            if kind == "box":
                rect = tuple(int(v) for v in rec["rect"])
                if len(rect) != 4 or min(rect) < 0:
                    raise TeacherError(f"line {lineno}: bad rect {rec['rect']}")
                if image_size is not None:
                    h, w = image_size
                    rect = (min(rect[0], w - 1), min(rect[1], h - 1), min(rect[2], w), min(rect[3], h))
                try:
                    boxes.append(BoxPrediction(view, rect, probs))
                except TeacherError as exc:
                    raise TeacherError(f"line {lineno}: {exc}") from None
            else:
                pixels = _rle_decode(rec["pixels_rle"])
                if image_size is not None and len(pixels) and \
                        (pixels.min() < 0 or pixels.max() >= image_size[0] * image_size[1]):
                    raise TeacherError(f"line {lineno}: pixel offset out of bounds")
                pixel_recs.append((view, pixels, probs))
    if boxes:
        return boxes
    if not pixel_recs:
        return []
    if image_size is None:
        raise TeacherError("pixel predictions need the image size")
    h, w = image_size
    r = len(pixel_recs[0][2])
    maps = {}
    for view, pixels, probs in pixel_recs:
        if view not in maps:
            maps[view] = (np.full((h * w, r), 1.0 / r), np.ones(h * w, dtype=bool))
        p, bg = maps[view]
        p[pixels] = probs
        bg[pixels] = False
    return [PixelPredictionMap(v, p.reshape(h, w, r), bg.reshape(h, w))
            for v, (p, bg) in sorted(maps.items())]
