import numpy as np
import pytest

from bidistill.geom import Camera, PointCloudShape, ViewRender, normalize_shape


def make_shape(points, labels=None, parts=("a", "b"), shape_id="s"):
    return PointCloudShape(shape_id, np.asarray(points, float), labels, list(parts))


def synthetic_view(owner, num_points, view_index=0):
    """ViewRender built directly from a pixel_owner map (camera is a placeholder)."""
    owner = np.asarray(owner, dtype=np.int64)
    h, w = owner.shape
    depth = np.where(owner >= 0, 1.0, np.inf)
    visible = np.zeros(num_points, dtype=bool)
    visible[owner[owner >= 0]] = True
    cam = Camera((0.0, -2.0, 0.0), image_size=(max(h, 16), max(w, 16)))
    return ViewRender(view_index, cam, owner, depth, visible)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blob_shape(rng):
    pts = rng.normal(size=(300, 3)) * np.array([1.0, 0.6, 0.3])
    labels = (pts[:, 0] > 0).astype(int)
    return normalize_shape(make_shape(pts, labels))
