"""Procedural part-labeled shapes built from boxes and cylinders."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .geom import PointCloudShape, normalize_shape


class Category(str, Enum):
    CHAIR = "chair"
    TABLE = "table"
    LAMP = "lamp"


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]

    def area(self) -> float:
        a, b, c = self.half
        return 8.0 * (a * b + b * c + c * a)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        a, b, c = self.half
        face_area = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        faces = rng.choice(6, size=n, p=face_area / face_area.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        uv[np.arange(n), axis] = sign
        return np.asarray(self.center) + uv * np.asarray(self.half)


@dataclass(frozen=True)
class Cylinder:
    """Closed cylinder aligned with the z axis."""

    center: tuple[float, float, float]
    radius: float
    half_height: float

    def area(self) -> float:
        r, h = self.radius, self.half_height
        return 2.0 * np.pi * r * (2.0 * h) + 2.0 * np.pi * r * r

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        r, h = self.radius, self.half_height
        side = 4.0 * np.pi * r * h
        cap = np.pi * r * r
        where = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        rad = np.where(where == 0, r, r * np.sqrt(rng.uniform(0.0, 1.0, size=n)))
        z = np.where(where == 0, rng.uniform(-h, h, size=n), np.where(where == 1, h, -h))
        return np.asarray(self.center) + np.stack([rad * np.cos(theta), rad * np.sin(theta), z], 1)


Primitive = Box | Cylinder


def _chair(rng: np.random.Generator) -> list[list[Primitive]]:
    sw, sd = rng.uniform(0.40, 0.55), rng.uniform(0.40, 0.55)
    st = rng.uniform(0.03, 0.06)
    top = rng.uniform(0.8, 1.0)
    lw = rng.uniform(0.03, 0.05)
    bt = rng.uniform(0.03, 0.06)
    bh = rng.uniform(0.7, 1.0)
    ah = rng.uniform(0.2, 0.3)
    aw, at = rng.uniform(0.03, 0.05), rng.uniform(0.02, 0.04)
    leg_h = (top - 2 * st) / 2
    seat = [Box((0, 0, top - st), (sw, sd, st))]
    legs = [Box((sx * (sw - lw), sy * (sd - lw), leg_h), (lw, lw, leg_h))
            for sx in (-1, 1) for sy in (-1, 1)]
    back = [Box((0, -(sd + bt), top + bh / 2 - 2 * st), (sw, bt, bh / 2 + st))]
    arms = []
    for sx in (-1, 1):
        x = sx * (sw + aw)
        arms.append(Box((x, 0, top + ah), (aw, sd, at)))
        arms.append(Box((x, sd - aw, top + ah / 2 - st), (aw, aw, ah / 2 + st)))
    return [back, seat, legs, arms]


def _table(rng: np.random.Generator) -> list[list[Primitive]]:
    tw, td = rng.uniform(0.6, 0.9), rng.uniform(0.4, 0.6)
    tt = rng.uniform(0.03, 0.06)
    height = rng.uniform(0.6, 0.8)
    lw = rng.uniform(0.03, 0.06)
    leg_h = (height - 2 * tt) / 2
    top = [Box((0, 0, height - tt), (tw, td, tt))]
    legs = [Box((sx * (tw - 2 * lw), sy * (td - 2 * lw), leg_h), (lw, lw, leg_h))
            for sx in (-1, 1) for sy in (-1, 1)]
    return [top, legs]


def _lamp(rng: np.random.Generator) -> list[list[Primitive]]:
    br, bh = rng.uniform(0.25, 0.4), rng.uniform(0.03, 0.06)
    pr, ph = rng.uniform(0.02, 0.04), rng.uniform(0.8, 1.2)
    sr, sh = rng.uniform(0.3, 0.45), rng.uniform(0.2, 0.35)
    base = [Cylinder((0, 0, bh), br, bh)]
    pole = [Cylinder((0, 0, 2 * bh + ph / 2), pr, ph / 2)]
    shade = [Cylinder((0, 0, 2 * bh + ph + sh / 2), sr, sh / 2)]
    return [base, pole, shade]


@dataclass(frozen=True)
class ShapeTemplate:
    category: Category
    part_names: tuple[str, ...]
    build: Callable[[np.random.Generator], list[list[Primitive]]]
    points_per_shape: int = 2048
    min_part_fraction: float = 0.01


CHAIR = ShapeTemplate(Category.CHAIR, ("back", "seat", "leg", "arm"), _chair)
TABLE = ShapeTemplate(Category.TABLE, ("top", "leg"), _table)
LAMP = ShapeTemplate(Category.LAMP, ("base", "pole", "shade"), _lamp)
TEMPLATES = {t.category.value: t for t in (CHAIR, TABLE, LAMP)}


def allocate_points(part_areas, total: int, min_fraction: float) -> np.ndarray:
    """Area-proportional integer allocation (largest remainder) with a floor of
    ``ceil(min_fraction * total)`` points per part."""
    areas = np.asarray(part_areas, dtype=float)
    floor = int(np.ceil(min_fraction * total))
    counts = np.full(len(areas), floor)
    rest = total - counts.sum()
    if rest < 0:
        raise ValueError("too few points for the per-part minimum")
    share = np.maximum(areas / areas.sum() * total - floor, 0.0)
    share = share / share.sum() * rest
    base = np.floor(share).astype(int)
    remainder = rest - base.sum()
    order = np.argsort(-(share - base), kind="stable")
    base[order[:remainder]] += 1
    return counts + base


def sample_primitives(template: ShapeTemplate, seed: int) -> list[list[Primitive]]:
    return template.build(np.random.default_rng([seed, 0]))


def generate_shape(template: ShapeTemplate, seed: int, shape_id: str | None = None
                   ) -> PointCloudShape:
    parts = sample_primitives(template, seed)
    rng = np.random.default_rng([seed, 1])
    part_areas = [sum(p.area() for p in prims) for prims in parts]
    counts = allocate_points(part_areas, template.points_per_shape, template.min_part_fraction)
    pts, labels = [], []
    for label, (prims, n) in enumerate(zip(parts, counts)):
        areas = np.array([p.area() for p in prims])
        which = rng.choice(len(prims), size=n, p=areas / areas.sum())
        for k, prim in enumerate(prims):
            m = int(np.count_nonzero(which == k))
            if m:
                pts.append(prim.sample(rng, m))
                labels.append(np.full(m, label))
    shape = PointCloudShape(shape_id or f"{template.category.value}-{seed}",
                            np.concatenate(pts), np.concatenate(labels), list(template.part_names))
    return normalize_shape(shape)


def sub_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_corpus(templates, count: int, seed: int) -> list[PointCloudShape]:
    if count < 1:
        raise ValueError("count must be >= 1")
    if isinstance(templates, ShapeTemplate):
        templates = [templates]
    out = []
    for i in range(count):
        t = templates[i % len(templates)]
        out.append(generate_shape(t, sub_seed(seed, i), shape_id=f"{t.category.value}-{i:04d}"))
    return out
