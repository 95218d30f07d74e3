import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bidistill.evaluate import (UNASSIGNED, EvalError, MetricsReport, corpus_iou, coverage,
                                exclude_uncovered, iou_2d_terms, iou_3d, miou_2d,
                                propagate_to_faces, report_json, voting_baseline, write_report)
from bidistill.teacher import KnowledgeUnit
from fixtures2d import FIXTURES, fixture_two_parts, fixture_worked, unit_from_pixels


class TestIoU3D:
    def test_identity(self):
        res = iou_3d([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert res.per_part == [1.0, 1.0, 1.0] and res.mean == 1.0

    def test_disjoint(self):
        assert iou_3d([1, 0], [0, 1], 2).mean == 0.0

    def test_third(self):
        # part 0: 10 shared, 20 more in the union
        pred = np.array([0] * 10 + [0] * 10 + [1] * 10)
        gt = np.array([0] * 10 + [1] * 10 + [0] * 10)
        assert iou_3d(pred, gt, 2).per_part[0] == pytest.approx(1 / 3)

    def test_absent_part_excluded(self):
        res = iou_3d([0, 0], [0, 0], 3)
        assert res.per_part == [1.0, None, None] and res.mean == 1.0

    def test_unassigned_always_wrong(self):
        res = iou_3d([UNASSIGNED, 0], [0, 0], 2)
        assert res.per_part[0] == 0.5

    def test_gt_unknown_skipped(self):
        assert iou_3d([1, 0], [-1, 0], 2).mean == 1.0
        with pytest.raises(EvalError, match="no ground truth"):
            iou_3d([0], [-1], 2)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_iou_symmetric_and_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, 30), rng.integers(0, 4, 30)
    perm = rng.permutation(4)
    x, y = iou_3d(a, b, 4), iou_3d(b, a, 4)
    assert x.per_part == y.per_part
    z = iou_3d(perm[a], perm[b], 4)
    assert [z.per_part[perm[r]] for r in range(4)] == x.per_part


class TestIoU2D:
    @pytest.mark.parametrize("fixture", FIXTURES)
    def test_fixtures(self, fixture):
        views, units, labels, r, resc, expected = fixture()
        assert miou_2d(views, units, labels, r, resc) == pytest.approx(expected, abs=1e-9)

    def test_worked_terms(self):
        views, units, labels, r, resc, _ = fixture_worked()
        t = iou_2d_terms(views, units, labels, r)[0]
        assert (t.intersection, t.false_positive, t.missed) == (2.0, 1.0, 1.0)

    def test_two_part_terms(self):
        views, units, labels, r, _, _ = fixture_two_parts()
        t0, t1, t2 = iou_2d_terms(views, units, labels, r)
        assert t0.intersection == pytest.approx(17.6) and t0.false_positive == pytest.approx(4.8)
        assert t0.missed == 8 and t1.missed == 16 and t2.iou is None

    def test_perfect(self):
        views, units, labels, r, _, _ = fixture_two_parts()
        view = views[0]
        perfect = [unit_from_pixels(view, *np.nonzero(labels.reshape(8, 8) == p), np.eye(3)[p], 64, p)
                   for p in (0, 1)]
        assert miou_2d(views, perfect, labels, 3) == 1.0

    def test_disjoint(self):
        views, _, labels, _, _, _ = fixture_two_parts()
        r, c = np.mgrid[0:8, 4:8]
        u = unit_from_pixels(views[0], r, c, [1.0, 0.0], 64)
        assert iou_2d_terms(views, [u], labels, 2)[0].iou == 0.0


@settings(max_examples=40, deadline=None)
@given(scale=st.floats(0.05, 1.0))
def test_2d_iou_monotone_in_confidence(scale):
    views, units, labels, r, _, _ = fixture_two_parts()
    for u in units:
        u.rescored_confidence = 0.9
    before = [t.iou for t in iou_2d_terms(views, units, labels, r, True)]
    for u in units:
        u.rescored_confidence = 0.9 * scale
    after = iou_2d_terms(views, units, labels, r, True)
    for b, t in zip(before, after):
        if b is not None and t.missed > 0:
            assert t.iou <= b + 1e-12


class TestVoting:
    def units(self):
        mk = lambda idx, lab: KnowledgeUnit("s", 0, np.isin(np.arange(5), idx), np.tile(np.eye(3)[lab], (len(idx), 1)))
        return [mk([0, 1], 2), mk([0], 1), mk([0, 2], 2), mk([3], 0), mk([3], 1)]

    def test_tally(self):
        labels = voting_baseline(5, self.units(), 3)
        assert labels.tolist() == [2, 2, 2, 0, UNASSIGNED]

    def test_unassigned_count_matches_coverage(self, rng):
        units = []
        for k in range(6):
            m = rng.random(40) < 0.15
            m[k] = True
            units.append(KnowledgeUnit("s", k, m, np.tile([0.3, 0.7], (int(m.sum()), 1))))
        labels = voting_baseline(40, units, 2)
        assert (labels == UNASSIGNED).sum() == (~coverage(units, 40)).sum()

    def test_exclude_uncovered(self):
        out = exclude_uncovered(np.array([1, 2, 0]), np.array([True, False, True]))
        assert out.tolist() == [1, UNASSIGNED, 0]


class TestFaces:
    def test_unanimous(self):
        pts = np.array([[0, 0, 0], [0.1, 0, 0], [0, 0.1, 0], [0, 0, 0.1], [0.1, 0.1, 0], [5, 5, 5]])
        assert propagate_to_faces([3, 3, 3, 3, 3, 0], pts, [[0.02, 0.02, 0.02]]).tolist() == [3]

    def test_majority(self):
        pts = np.arange(6, dtype=float)[:, None] * [1, 0, 0]
        pred = [1, 2, 1, 2, 1, 0]
        assert propagate_to_faces(pred, pts, [[0.0, 0, 0]]).tolist() == [1]

    def test_tie_nearest(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], float)
        assert propagate_to_faces([4, 7, 7, 4], pts, [[1.1, 0, 0]]).tolist() == [7]

    def test_fewer_than_five(self):
        pts = np.eye(3)
        assert propagate_to_faces([0, 1, 1], pts, [[1, 0, 0]]).tolist() == [1]

    def test_brute_force(self, rng):
        pts = rng.normal(size=(50, 3))
        pred = rng.integers(0, 3, 50)
        cents = rng.normal(size=(20, 3))
        out = propagate_to_faces(pred, pts, cents)
        for f, c in enumerate(cents):
            nn = np.argsort(np.linalg.norm(pts - c, axis=1), kind="stable")[:5]
            counts = np.bincount(pred[nn], minlength=3)
            tied = np.flatnonzero(counts == counts.max())
            assert out[f] == next(p for p in pred[nn] if p in tied)


class TestReport:
    def report(self):
        return MetricsReport(per_part_iou_3d=[0.1 + 1e-17, None, 2 / 3], miou_3d=0.38333333333333336,
                             part_names=["a", "b", "c"], baseline_miou_3d=0.2, seed=3,
                             config={"views": 10})

    def test_omits_empty(self):
        d = self.report().to_dict()
        assert "miou_2d" not in d and "per_view_part_iou_2d" not in d and d["per_part_iou_3d"][1] is None

    def test_round_trip(self, tmp_path):
        path = write_report(self.report(), tmp_path / "r.json")
        text = path.read_text()
        assert report_json(json.loads(text)) == text
        assert json.loads(text)["per_part_iou_3d"][2] == 2 / 3

    def test_unwritable(self, tmp_path):
        with pytest.raises(EvalError):
            write_report(self.report(), tmp_path / "missing" / "r.json")


def test_corpus_iou_shape_average():
    res = corpus_iou([np.array([0, 0]), np.array([0, 1])], [np.array([0, 0]), np.array([0, 0])], 2)
    assert res.per_shape == [1.0, 0.25] and res.miou == 0.625
    assert res.per_part == [0.75, 0.0]
