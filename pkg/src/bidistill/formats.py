"""Reading and writing the on-disk artifacts used between pipeline stages."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geom import NONE, Camera, PointCloudShape, ViewRender
from .teacher import KnowledgeUnit


class FormatError(ValueError):
    pass


# 16 visually distinct colours; index = part label, wrapped modulo 16
PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
], dtype=np.uint8)
UNLABELED_COLOR = (40, 40, 40)


def write_xyzl(shape: PointCloudShape, path) -> None:
    labels = shape.labels if shape.labels is not None else np.full(shape.num_points, -1)
    lines = [f"{shape.num_points} {shape.num_parts}", " ".join(shape.part_names)]
    lines += [f"{x!r} {y!r} {z!r} {int(label)}" for (x, y, z), label in zip(shape.points.tolist(), labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_xyzl(path, shape_id: str | None = None) -> PointCloudShape:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    try:
        n, r = (int(v) for v in lines[0].split())
        names = lines[1].split()
        rows = [line.split() for line in lines[2:2 + n] if line.strip()]
        if len(names) != r or len(rows) != n:
            raise FormatError(f"{path}: header says {n} points / {r} parts")
        pts = np.array([[float(v) for v in row[:3]] for row in rows])
        labels = np.array([int(row[3]) for row in rows])
    except (IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed xyzl ({exc})") from None
    return PointCloudShape(shape_id or path.stem, pts, labels, names)


def list_corpus(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.xyzl"))


def read_corpus(directory) -> list[PointCloudShape]:
    paths = list_corpus(directory)
    if not paths:
        raise FormatError(f"no .xyzl shapes in {directory}")
    return [read_xyzl(p) for p in paths]


def save_views(views: list[ViewRender], path) -> None:
    cams = views[0].camera
    np.savez_compressed(
        path,
        pixel_owner=np.stack([v.pixel_owner for v in views]).astype(np.int32),
        depth=np.stack([v.depth for v in views]),
        visible=np.stack([v.visible for v in views]),
        view_index=np.array([v.view_index for v in views]),
        position=np.array([v.camera.position for v in views]),
        look_at=np.array([v.camera.look_at for v in views]),
        up=np.array([v.camera.up for v in views]),
        fov=np.array([v.camera.vertical_fov for v in views]),
        image_size=np.array(cams.image_size),
    )


def load_views(path) -> list[ViewRender]:
    with np.load(path) as z:
        size = tuple(int(s) for s in z["image_size"])
        views = []
        for k in range(len(z["view_index"])):
            cam = Camera(tuple(z["position"][k].tolist()), tuple(z["look_at"][k].tolist()),
                         tuple(z["up"][k].tolist()), float(z["fov"][k]), size)
            views.append(ViewRender(int(z["view_index"][k]), cam,
                                    z["pixel_owner"][k].astype(np.int64), z["depth"][k],
                                    z["visible"][k].astype(bool)))
    return views


def save_units(units: list[KnowledgeUnit], num_points: int, num_parts: int, path) -> None:
    d = len(units)
    masks = np.zeros((d, num_points), dtype=bool)
    probs = np.zeros((d, num_points, num_parts))
    for k, u in enumerate(units):
        masks[k] = u.mask
        probs[k, u.indices] = u.probs
    pix = [u.pixels if u.pixels is not None else np.zeros(0, np.int64) for u in units]
    offsets = np.cumsum([0] + [len(p) for p in pix])
    rescored = np.array([np.nan if u.rescored_confidence is None else u.rescored_confidence
                         for u in units])
    np.savez_compressed(path, masks=masks, probs=probs, view_index=np.array([u.view_index for u in units]),
                        pixels=np.concatenate(pix) if pix else np.zeros(0, np.int64),
                        pixel_offsets=offsets, rescored=rescored,
                        shape=np.array([num_points, num_parts]))


def load_units(path, shape_id: str) -> list[KnowledgeUnit]:
    with np.load(path) as z:
        masks, probs = z["masks"], z["probs"]
        pixels, offsets = z["pixels"], z["pixel_offsets"]
        units = []
        for k in range(len(masks)):
            resc = float(z["rescored"][k])
            units.append(KnowledgeUnit(shape_id, k, masks[k], probs[k][masks[k]],
                                       int(z["view_index"][k]), pixels[offsets[k]:offsets[k + 1]],
                                       None if np.isnan(resc) else resc))
    return units


def write_pred(labels, path) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels), encoding="utf-8")


def read_pred(path) -> np.ndarray:
    return np.array([int(v) for v in Path(path).read_text(encoding="utf-8").split()], dtype=np.int64)


def write_pgm(image: np.ndarray, path) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def write_ppm(image: np.ndarray, path) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def depth_image(view: ViewRender) -> np.ndarray:
    """Near = bright, empty = black."""
    d = view.depth
    finite = np.isfinite(d)
    out = np.zeros(d.shape, dtype=np.uint8)
    if finite.any():
        lo, hi = d[finite].min(), d[finite].max()
        span = hi - lo if hi > lo else 1.0
        out[finite] = (255 - 200 * (d[finite] - lo) / span).astype(np.uint8)
    return out


def label_image(view: ViewRender, labels) -> np.ndarray:
    labels = np.asarray(labels)
    owner = view.pixel_owner
    out = np.zeros((*owner.shape, 3), dtype=np.uint8)
    hit = owner != NONE
    lab = labels[owner[hit]]
    colors = PALETTE[np.mod(lab, len(PALETTE))]
    colors[lab < 0] = UNLABELED_COLOR
    out[hit] = colors
    return out


def parse_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out
