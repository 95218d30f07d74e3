"""Point-cloud normalization, pinhole cameras, z-buffered point splatting and
pixel-to-point back-projection."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

NONE = -1  # pixel_owner value for pixels no point covers

DEFAULT_DISTANCE = 2.2
DEFAULT_FOV = np.deg2rad(60.0)
DEFAULT_ELEVATION = np.deg2rad(25.0)
DEPTH_EPS = 1e-6


class GeometryError(ValueError):
    pass


@dataclass
class PointCloudShape:
    shape_id: str
    points: np.ndarray
    labels: np.ndarray | None = None
    part_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise GeometryError("shape needs at least one point")
        if len(self.part_names) < 2:
            raise GeometryError("shape needs at least two parts")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise GeometryError("labels and points differ in length")
            bad = (self.labels < -1) | (self.labels >= self.num_parts)
            if bad.any():
                raise GeometryError(f"label out of range at index {int(np.argmax(bad))}")

    @property
    def num_points(self) -> int:
        return len(self.points)

    @property
    def num_parts(self) -> int:
        return len(self.part_names)

    @property
    def fully_labeled(self) -> bool:
        return self.labels is not None and bool((self.labels >= 0).all())


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    vertical_fov: float = DEFAULT_FOV
    image_size: tuple[int, int] = (224, 224)

    def __post_init__(self):
        forward = np.subtract(self.look_at, self.position)
        if np.linalg.norm(forward) == 0:
            raise GeometryError("camera position equals look_at")
        if np.linalg.norm(np.cross(forward, self.up)) < 1e-12 * np.linalg.norm(forward):
            raise GeometryError("up vector parallel to viewing direction")
        if not 0 < self.vertical_fov < np.pi:
            raise GeometryError("vertical_fov must lie in (0, pi)")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise GeometryError("image dimensions must be at least 16")

    def basis(self) -> np.ndarray:
        """Rows are the camera right, up and forward axes in world coordinates."""
        forward = np.subtract(self.look_at, self.position).astype(np.float64)
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return np.stack([right, true_up, forward])

    @property
    def focal(self) -> float:
        return (self.image_size[0] / 2.0) / np.tan(self.vertical_fov / 2.0)


@dataclass
class ViewRender:
    view_index: int
    camera: Camera
    pixel_owner: np.ndarray  # (H, W) int, NONE where empty
    depth: np.ndarray  # (H, W) float, +inf where empty
    visible: np.ndarray  # (N,) bool

    @property
    def image_size(self) -> tuple[int, int]:
        return self.pixel_owner.shape


def normalize_shape(shape: PointCloudShape) -> PointCloudShape:
    pts = shape.points - shape.points.mean(axis=0)
    extent = np.linalg.norm(pts, axis=1).max()
    if extent <= 1e-12:
        raise GeometryError("zero extent")
    pts = pts / extent
    # recentre once more so float round-off in the division cannot leave a bias
    pts = pts - pts.mean(axis=0)
    pts = pts / np.linalg.norm(pts, axis=1).max()
    return replace(shape, points=pts)


def make_view_ring(num_views: int, image_size=(224, 224), distance=DEFAULT_DISTANCE,
                   fov=DEFAULT_FOV, elevation=DEFAULT_ELEVATION) -> list[Camera]:
    """Cameras on an azimuth ring, alternating +/- elevation, looking at the origin."""
    if num_views < 1:
        raise GeometryError("need at least one view")
    cams = []
    for k in range(num_views):
        az = 2.0 * np.pi * k / num_views
        el = elevation if k % 2 == 0 else -elevation
        pos = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera(position=tuple(float(c) for c in pos), vertical_fov=float(fov),
                           image_size=tuple(int(s) for s in image_size)))
    return cams


def project_points(camera: Camera, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pinhole projection.

    Returns ``(pixels, depth, valid)`` where ``pixels[:, 0]`` is the continuous row
    and ``pixels[:, 1]`` the continuous column; pixel ``(i, j)`` spans
    ``[i, i+1) x [j, j+1)``. Points at depth <= 1e-6 or landing outside the image
    are marked invalid.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = (pts - np.asarray(camera.position)) @ camera.basis().T
    depth = cam[:, 2]
    h, w = camera.image_size
    f = camera.focal
    in_front = depth > DEPTH_EPS
    safe = np.where(in_front, depth, 1.0)
    col = w / 2.0 + f * cam[:, 0] / safe
    row = h / 2.0 - f * cam[:, 1] / safe
    valid = in_front & (row >= 0) & (row < h) & (col >= 0) & (col < w)
    return np.stack([row, col], axis=1), depth, valid


def disk_offsets(radius: float) -> np.ndarray:
    r = int(np.ceil(radius)) + 1
    d = np.arange(-r, r + 1)
    return np.stack(np.meshgrid(d, d, indexing="ij"), axis=-1).reshape(-1, 2)


def render_view(camera: Camera, shape: PointCloudShape, splat_radius: float = 2.0,
                view_index: int = 0) -> ViewRender:
    """Splat every valid point as a disk and resolve overlaps with a z-buffer.

    A pixel belongs to a point's disk when the pixel centre lies within
    ``splat_radius`` of the point's projection. The nearest point wins; exact depth
    ties go to the lower point index.
    """
    if splat_radius < 1:
        raise GeometryError("splat_radius must be >= 1")
    h, w = camera.image_size
    n = shape.num_points
    pix, depth, valid = project_points(camera, shape.points)
    idx = np.flatnonzero(valid)

    offsets = disk_offsets(splat_radius)
    base = np.floor(pix[idx]).astype(np.int64)
    cand = base[:, None, :] + offsets[None, :, :]  # (M, K, 2)
    centre_d2 = ((cand + 0.5 - pix[idx][:, None, :]) ** 2).sum(-1)
    inside = (centre_d2 <= splat_radius ** 2) & (cand[..., 0] >= 0) & (cand[..., 0] < h) \
        & (cand[..., 1] >= 0) & (cand[..., 1] < w)
    m_i, k_i = np.nonzero(inside)
    owners = idx[m_i]
    flat = cand[m_i, k_i, 0] * w + cand[m_i, k_i, 1]

    pixel_owner = np.full(h * w, NONE, dtype=np.int64)
    zbuf = np.full(h * w, np.inf)
    if len(flat):
        order = np.lexsort((owners, depth[owners], flat))
        flat_s, owners_s = flat[order], owners[order]
        first = np.ones(len(flat_s), dtype=bool)
        first[1:] = flat_s[1:] != flat_s[:-1]
        pixel_owner[flat_s[first]] = owners_s[first]
        zbuf[flat_s[first]] = depth[owners_s[first]]

    visible = np.zeros(n, dtype=bool)
    visible[pixel_owner[pixel_owner != NONE]] = True
    return ViewRender(view_index=view_index, camera=camera,
                      pixel_owner=pixel_owner.reshape(h, w), depth=zbuf.reshape(h, w),
                      visible=visible)


def render_views(cameras: list[Camera], shape: PointCloudShape, splat_radius: float = 2.0
                 ) -> list[ViewRender]:
    return [render_view(cam, shape, splat_radius, view_index=v) for v, cam in enumerate(cameras)]


def region_mask(image_size, rows=None, cols=None, rect=None) -> np.ndarray:
    """Boolean (H, W) mask from explicit pixel coordinates or a half-open rect
    ``(x1, y1, x2, y2)`` with x along columns."""
    h, w = image_size
    mask = np.zeros((h, w), dtype=bool)
    if rect is not None:
        x1, y1, x2, y2 = (int(round(v)) for v in rect)
        mask[max(y1, 0):max(min(y2, h), 0), max(x1, 0):max(min(x2, w), 0)] = True
    if rows is not None:
        mask[np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)] = True
    return mask


def back_project(view: ViewRender, region: np.ndarray, num_points: int | None = None) -> np.ndarray:
    """Mask of points owning at least one pixel of ``region`` (an (H, W) bool mask)."""
    region = np.asarray(region, dtype=bool)
    if region.shape != view.pixel_owner.shape:
        raise GeometryError("region shape does not match the view")
    n = len(view.visible) if num_points is None else num_points
    owners = view.pixel_owner[region]
    mask = np.zeros(n, dtype=bool)
    mask[owners[owners != NONE]] = True
    return mask
