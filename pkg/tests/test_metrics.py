import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hepatoscan.metrics import (
    EvalStats,
    density_error_stats,
    dice,
    dice_bits,
    nearest_rank,
    roc_auc,
    sens_spec,
    sensitivity,
)
from hepatoscan.volume import BinaryMask, InvalidArgumentError, VoxelGrid


def masks(a, b, sp=(1.0, 1.0, 1.0)):
    a, b = np.asarray(a, bool).reshape(1, 1, -1), np.asarray(b, bool).reshape(1, 1, -1)
    g = VoxelGrid((a.size, 1, 1), sp)
    return BinaryMask(g, a), BinaryMask(g, b)


class TestDice:
    def test_examples(self):
        assert dice(*masks([1, 1, 0], [1, 1, 0])) == 1.0
        assert dice(*masks([1, 1, 0, 0], [0, 0, 1, 1])) == 0.0
        assert dice(*masks([1, 1, 1, 1, 0, 0], [0, 0, 1, 1, 1, 1])) == 0.5
        assert dice(*masks([0, 0], [0, 0])) == 1.0

    def test_grid_mismatch(self):
        a, _ = masks([1, 0], [1, 0])
        b = BinaryMask(VoxelGrid((2, 1, 1), (2.0, 1.0, 1.0)), a.bits)
        with pytest.raises(InvalidArgumentError):
            dice(a, b)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.bool_, 12), arrays(np.bool_, 12))
    def test_symmetric_and_bounded(self, a, b):
        d = dice_bits(a, b)
        assert d == dice_bits(b, a)
        assert 0.0 <= d <= 1.0
        assert (d == 1.0) == bool(np.array_equal(a, b))


class TestAuc:
    def test_examples(self):
        assert roc_auc([0.9, 0.8, 0.3, 0.1], [True, True, False, False]) == 1.0
        assert roc_auc([0.4] * 6, [True, False] * 3) == 0.5
        assert roc_auc([0.9, 0.6, 0.4, 0.1], [True, False, True, False]) == 0.75
        assert roc_auc([0.1, 0.9], [True, False]) == 0.0

    def test_single_class(self):
        with pytest.raises(InvalidArgumentError):
            roc_auc([0.1, 0.2], [True, True])
        with pytest.raises(InvalidArgumentError):
            roc_auc([0.1, 0.2], [True])

    def brute(self, s, y):
        pos = [a for a, l in zip(s, y) if l]
        neg = [a for a, l in zip(s, y) if not l]
        wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
        return wins / (len(pos) * len(neg))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=30))
    def test_matches_pair_count(self, pairs):
        s = [float(a) for a, _ in pairs]
        y = [l for _, l in pairs]
        assume(any(y) and not all(y))
        assert roc_auc(s, y) == pytest.approx(self.brute(s, y), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(-100, 100), st.booleans()), min_size=2, max_size=30))
    def test_monotone_invariance(self, pairs):
        # coarse grid so the transform stays strictly increasing in floating point
        s = np.array([a / 100.0 for a, _ in pairs])
        y = [l for _, l in pairs]
        assume(any(y) and not all(y))
        assert roc_auc(np.exp(3.0 * s) + 7.0, y) == pytest.approx(roc_auc(s, y), abs=1e-12)


class TestSensSpec:
    def test_examples(self):
        det = [True] * 9 + [False] + [False] * 5
        lab = [True] * 10 + [False] * 5
        assert sens_spec(det, lab) == (0.9, 1.0)
        assert sens_spec([True, False], [True, False]) == (1.0, 1.0)

    def test_headline_sensitivity(self):
        s = sensitivity([True] * 460 + [False] * 21, [True] * 481)
        assert s == 460 / 481
        assert round(s, 3) == 0.956 and round(100 * s, 1) == 95.6

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            sens_spec([True], [True])
        with pytest.raises(InvalidArgumentError):
            sens_spec([True, False], [True])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.001, 0.999), st.booleans()), min_size=2, max_size=30))
    def test_threshold_endpoints(self, pairs):
        s = [a for a, _ in pairs]
        y = [l for _, l in pairs]
        assume(any(y) and not all(y))
        assert sens_spec([v >= 0.0 for v in s], y)[0] == 1.0
        assert sens_spec([v >= 1.0 for v in s], y)[1] == 1.0


class TestDensityError:
    def test_examples(self):
        assert density_error_stats([10.0, 20.0], [10.0, 20.0]) == (0.0, 0.0, 0.0)
        std, p95, mx = density_error_stats([0.0, 2.0], [0.0, 0.0])
        assert std == pytest.approx(math.sqrt(2.0)) and p95 == 2.0 and mx == 2.0

    def test_sign_ignored_for_percentiles(self):
        std, p95, mx = density_error_stats([-3.0, 1.0], [0.0, 0.0])
        assert (p95, mx) == (3.0, 3.0)
        assert std == pytest.approx(math.sqrt(5.0))

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            density_error_stats([1.0], [1.0, 2.0])
        with pytest.raises(InvalidArgumentError):
            density_error_stats([], [])

    def test_nearest_rank(self):
        v = list(range(1, 21))
        assert nearest_rank(v, 95) == 19
        assert nearest_rank(v, 100) == 20
        assert nearest_rank([5.0], 95) == 5.0
        assert nearest_rank(list(range(1, 201)), 95) == 190

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=40))
    def test_p95_le_max(self, errs):
        _, p95, mx = density_error_stats(errs, [0.0] * len(errs))
        assert p95 <= mx


def test_eval_stats_render():
    s = EvalStats(1.0, 0.5, 0.75, float("nan"), 1.5, 2.0, 3.25, 4, 1)
    assert s.render() == (
        "sensitivity = 1.000000\n"
        "specificity = 0.500000\n"
        "auc = 0.750000\n"
        "dice_mean = nan\n"
        "density_err_std_hu = 1.500000\n"
        "density_err_p95_hu = 2.000000\n"
        "density_err_max_hu = 3.250000\n"
        "n_studies = 4\n"
        "n_skipped = 1\n"
    )
