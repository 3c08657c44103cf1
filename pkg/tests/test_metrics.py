import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from tassn import metrics as mt

from .oracles import epe_loop, pck_count, riemann_auc


def random_instance(rng):
    frames, k = int(rng.integers(1, 6)), int(rng.integers(1, 22))
    gt = rng.normal(0, 50, (frames, k, 3))
    pred = gt + rng.normal(0, rng.uniform(1, 40), (frames, k, 3))
    return pred, gt


class TestEpe:
    def test_perfect(self, rng):
        p = rng.standard_normal((21, 3))
        assert mt.epe(p, p) == 0.0

    def test_pythagorean(self):
        gt = np.zeros((2, 3))
        pred = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 5.0]])
        assert mt.epe(pred, gt) == 5.0

    def test_random_vs_loop(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            pred, gt = random_instance(rng)
            assert abs(mt.epe(pred, gt) - epe_loop(pred, gt)) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mt.epe(np.zeros((3, 3)), np.zeros((4, 3)))

    def test_translation_invariant(self, rng):
        pred, gt = random_instance(rng)
        shift = rng.normal(0, 100, 3)
        assert mt.epe(pred + shift, gt + shift) == pytest.approx(mt.epe(pred, gt), rel=1e-12)


class TestPck:
    def test_single_keypoint_30mm(self):
        curve = mt.pck_curve([np.array([[30.0, 0.0, 0.0]])], [np.zeros((1, 3))], [20.0, 50.0])
        assert_array_equal(curve.values, [0.0, 1.0])

    def test_perfect_is_one(self, rng):
        p = rng.standard_normal((4, 21, 3))
        assert_array_equal(mt.pck_curve(p, p).values, np.ones(51))

    def test_random_vs_count(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            pred, gt = random_instance(rng)
            curve = mt.pck_curve([pred], [gt])
            assert np.abs(curve.values - pck_count(pred, gt, mt.DEFAULT_THRESHOLDS)).max() <= 1e-9

    def test_list_of_frames(self, rng):
        pred, gt = random_instance(rng)
        whole = mt.pck_curve([pred], [gt]).values
        split = mt.pck_curve(list(pred), list(gt)).values
        assert_array_equal(whole, split)

    def test_nondecreasing(self, rng):
        pred, gt = random_instance(rng)
        assert np.all(np.diff(mt.pck_curve(pred, gt).values) >= 0)

    def test_empty(self):
        with pytest.raises(ValueError):
            mt.pck_curve([], [])
        with pytest.raises(ValueError):
            mt.pck_curve([np.zeros((0, 3))], [np.zeros((0, 3))])

    def test_thresholds_strictly_ascending(self):
        with pytest.raises(ValueError):
            mt.PckCurve(np.array([1.0, 1.0]), np.array([0.0, 1.0]))


class TestAuc:
    def test_constant_one(self):
        c = mt.PckCurve(mt.DEFAULT_THRESHOLDS, np.ones(51))
        for lo, hi in [(0, 50), (20, 50), (3.5, 7.25)]:
            assert mt.auc(c, lo, hi) == 1.0

    def test_constant_half(self):
        c = mt.PckCurve(mt.DEFAULT_THRESHOLDS, np.full(51, 0.5))
        assert mt.auc(c, 0, 50) == 0.5

    def test_vs_riemann(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            pred, gt = random_instance(rng)
            c = mt.pck_curve(pred, gt)
            lo, hi = sorted(rng.uniform(0, 50, 2))
            assert abs(mt.auc(c, lo, hi) - riemann_auc(c.thresholds, c.values, lo, hi)) <= 1e-6

    def test_standard_windows_vs_riemann(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            pred, gt = random_instance(rng)
            c = mt.pck_curve(pred, gt)
            for lo, hi in [(0, 50), (20, 50)]:
                assert abs(mt.auc(c, lo, hi) - riemann_auc(c.thresholds, c.values, lo, hi)) <= 1e-9

    def test_range_error(self):
        c = mt.PckCurve(mt.DEFAULT_THRESHOLDS, np.ones(51))
        with pytest.raises(ValueError):
            mt.auc(c, 20, 10)
        with pytest.raises(ValueError):
            mt.auc(c, 0, 60)

    def test_window_ordering(self, rng):
        for _ in range(20):
            pred, gt = random_instance(rng)
            c = mt.pck_curve(pred, gt)
            assert mt.auc(c, 0, 50) <= mt.auc(c, 20, 50) + 1e-15


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=51, max_size=51), st.lists(st.floats(0, 0.5), min_size=51, max_size=51))
def test_auc_monotone_under_dominance(base, extra):
    low = mt.PckCurve(mt.DEFAULT_THRESHOLDS, np.array(base))
    high = mt.PckCurve(mt.DEFAULT_THRESHOLDS, np.array(base) + np.array(extra))
    assert mt.auc(high, 0, 50) >= mt.auc(low, 0, 50)
    assert mt.auc(high, 20, 50) >= mt.auc(low, 20, 50)


def test_summary_and_csv(tmp_path, rng):
    pred, gt = random_instance(rng)
    summary = mt.summarize([pred], [gt])
    assert set(summary) == {"epe_mm", "auc_0_50", "auc_20_50"}
    mt.write_summary_csv(tmp_path / "s.csv", summary)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["metric", "value"]
    assert [r[0] for r in rows[1:]] == ["epe_mm", "auc_0_50", "auc_20_50"]
    curve = mt.pck_curve(pred, gt)
    mt.write_pck_csv(tmp_path / "p.csv", curve)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["threshold_mm", "pck"]
    assert len(rows) == 52
    values = [float(r[1]) for r in rows[1:]]
    assert values == sorted(values)
