import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bidistill.synth import (CHAIR, LAMP, TABLE, Box, Cylinder, allocate_points, generate_corpus,
                             generate_shape, sample_primitives)


def test_deterministic():
    a, b = generate_shape(CHAIR, 11), generate_shape(CHAIR, 11)
    assert a.points.tobytes() == b.points.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)


@pytest.mark.parametrize("template", [CHAIR, TABLE, LAMP])
def test_construction_contract(template):
    s = generate_shape(template, 5)
    assert s.num_points == template.points_per_shape
    assert set(s.labels.tolist()) == set(range(len(template.part_names)))
    assert np.bincount(s.labels).min() >= 0.01 * s.num_points
    assert np.abs(s.points.mean(0)).max() < 1e-9
    assert np.linalg.norm(s.points, axis=1).max() == pytest.approx(1.0)


def test_chair_fractions_track_area():
    deviations = []
    for seed in range(100):
        parts = sample_primitives(CHAIR, seed)
        areas = np.array([sum(p.area() for p in prims) for prims in parts])
        frac = np.bincount(generate_shape(CHAIR, seed).labels, minlength=4) / CHAIR.points_per_shape
        deviations.append(np.abs(frac - areas / areas.sum()))
    assert np.max(deviations) <= 0.05


def test_box_surface_samples():
    rng = np.random.default_rng(0)
    box = Box((0.1, 0.2, 0.3), (0.5, 0.25, 0.1))
    pts = box.sample(rng, 4000) - box.center
    on_face = np.isclose(np.abs(pts), box.half).any(1)
    assert on_face.all()
    # fraction on the two z faces equals their share of area
    zfrac = np.isclose(np.abs(pts[:, 2]), 0.1).mean()
    assert zfrac == pytest.approx(2 * 4 * 0.5 * 0.25 / box.area(), abs=0.03)


def test_cylinder_surface_samples():
    rng = np.random.default_rng(1)
    cyl = Cylinder((0, 0, 0), 0.3, 0.5)
    pts = cyl.sample(rng, 4000)
    rad = np.hypot(pts[:, 0], pts[:, 1])
    on_side = np.isclose(rad, 0.3)
    on_cap = np.isclose(np.abs(pts[:, 2]), 0.5) & (rad <= 0.3 + 1e-12)
    assert (on_side | on_cap).all()
    assert on_side.mean() == pytest.approx(2 * np.pi * 0.3 * 1.0 / cyl.area(), abs=0.03)


def test_allocate_points():
    np.testing.assert_array_equal(allocate_points([1, 1, 2], 8, 0.0), [2, 2, 4])
    counts = allocate_points([100, 1], 100, 0.05)
    assert counts.sum() == 100 and counts[1] >= 5


class TestCorpus:
    def test_single(self):
        assert len(generate_corpus(CHAIR, 1, 0)) == 1

    def test_repeatable(self):
        a, b = generate_corpus([CHAIR, TABLE], 4, 3), generate_corpus([CHAIR, TABLE], 4, 3)
        assert all(x.points.tobytes() == y.points.tobytes() for x, y in zip(a, b))

    def test_ids(self):
        corpus = generate_corpus([CHAIR, TABLE, LAMP], 7, 3)
        ids = [s.shape_id for s in corpus]
        assert len(set(ids)) == 7 and ids == sorted(ids, key=lambda i: i.split("-")[1])
        assert [s.part_names[0] for s in corpus[:3]] == ["back", "top", "base"]

    def test_distinct_seeds(self):
        seen = {generate_shape(TABLE, s).points[:4].tobytes() for s in range(200)}
        assert len(seen) == 200


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_labels_always_valid(seed):
    s = generate_shape(LAMP, seed)
    assert s.labels.min() == 0 and s.labels.max() == 2
