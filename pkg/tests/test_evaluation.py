import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aortaseg.evaluation import (MetricsReport, compare_cohorts, dice, icc,
                                 mask_volume_mm3, multiclass_dice,
                                 observer_report)
from aortaseg.volume import HuStats, LabelMask

# frozen from the independent ANOVA-table oracle (mean squares computed by
# the two-way sum-of-squares decomposition before implementation)
ICC_FIXTURE = np.array([[10.0, 12.0], [20.0, 19.0], [30.0, 33.0], [40.0, 38.0]])
ICC_FIXTURE_VALUE = 0.9855382967327265


def lm(arr, class_set=frozenset({0, 1, 2})):
    return LabelMask(np.asarray(arr, np.int16), (1.0, 1.0, 1.0),
                     class_set=class_set)


class TestDice:
    def test_identical_nonempty(self):
        a = np.zeros((4, 4, 4), bool)
        a[1:3] = True
        assert dice(a, a) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0], b[3] = True, True
        assert dice(a, b) == 0.0

    def test_direct_formula(self):
        a = np.zeros(8, bool)
        b = np.zeros(8, bool)
        a[:4], b[2:6] = True, True  # |A|=|B|=4, |A i B|=2
        assert dice(a, b) == 0.5

    def test_both_empty_is_one(self):
        assert dice(np.zeros(4, bool), np.zeros(4, bool)) == 1.0

    def test_empty_vs_nonempty_is_zero(self):
        assert dice(np.zeros(4, bool), np.ones(4, bool)) == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros(4, bool), np.zeros(5, bool))

    @given(st.integers(0, 2 ** 27 - 1))
    @settings(max_examples=30, deadline=None)
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((4, 4, 4)) < 0.4
        b = rng.random((4, 4, 4)) < 0.4
        d = dice(a, b)
        assert d == dice(b, a)
        assert 0.0 <= d <= 1.0


class TestMulticlassDice:
    def test_perfect(self):
        rng = np.random.default_rng(0)
        m = lm(rng.integers(0, 3, (5, 5, 5)))
        scores = multiclass_dice(m, m)
        assert scores == {"entire": 1.0, "inner_lumen": 1.0, "wall_ilt": 1.0}

    def test_swapped_classes(self):
        arr = np.zeros((4, 4, 4), np.int16)
        arr[0], arr[1] = 1, 2  # equal-sized disjoint classes
        swapped = np.where(arr == 1, 2, np.where(arr == 2, 1, 0)).astype(np.int16)
        scores = multiclass_dice(lm(swapped), lm(arr))
        assert scores["inner_lumen"] == 0.0
        assert scores["wall_ilt"] == 0.0
        assert scores["entire"] == 1.0

    def test_voxel_counting_oracle(self):
        rng = np.random.default_rng(1)
        p = lm(rng.integers(0, 3, (6, 6, 6)))
        g = lm(rng.integers(0, 3, (6, 6, 6)))
        scores = multiclass_dice(p, g)
        for cls, key in ((1, "inner_lumen"), (2, "wall_ilt")):
            inter = np.count_nonzero((p.labels == cls) & (g.labels == cls))
            na = np.count_nonzero(p.labels == cls)
            nb = np.count_nonzero(g.labels == cls)
            assert scores[key] == 2 * inter / (na + nb)

    def test_vocabulary_mismatch(self):
        with pytest.raises(ValueError, match="vocabulary"):
            multiclass_dice(lm(np.zeros((2, 2, 2)), frozenset({0, 1})),
                            lm(np.zeros((2, 2, 2))))

    def test_entire_invariant_under_label_permutation(self):
        rng = np.random.default_rng(2)
        p = rng.integers(0, 3, (5, 5, 5)).astype(np.int16)
        g = rng.integers(0, 3, (5, 5, 5)).astype(np.int16)
        base = multiclass_dice(lm(p), lm(g))["entire"]
        swap = lambda a: np.where(a == 1, 2, np.where(a == 2, 1, 0)).astype(np.int16)
        assert multiclass_dice(lm(swap(p)), lm(swap(g)))["entire"] == base


class TestIcc:
    def test_identical_raters(self):
        m = np.array([[10.0, 10.0], [20.0, 20.0], [30.0, 30.0]])
        value, degenerate = icc(m)
        assert value == 1.0

    def test_frozen_anova_fixture(self):
        value, degenerate = icc(ICC_FIXTURE)
        assert not degenerate
        assert value == pytest.approx(ICC_FIXTURE_VALUE, abs=1e-10)

    def test_permuted_rater_near_zero(self):
        # rater 2 is a cyclic shift of rater 1: agreement destroyed
        r1 = np.array([10.0, 20.0, 30.0, 40.0])
        m = np.stack([r1, np.roll(r1, 1)], axis=1)
        value, _ = icc(m)
        assert value < 0.2

    def test_degenerate_constant_matrix(self):
        value, degenerate = icc(np.full((3, 2), 5.0))
        assert value == 1.0 and degenerate

    def test_too_small(self):
        with pytest.raises(ValueError):
            icc(np.array([[1.0, 2.0]]))

    @given(st.integers(0, 2 ** 27 - 1), st.floats(0.1, 10.0),
           st.floats(-100.0, 100.0))
    @settings(max_examples=30, deadline=None)
    def test_affine_invariance(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        m = rng.normal(50, 20, (5, 3))
        base, deg = icc(m)
        scaled, _ = icc(alpha * m + beta)
        if not deg:
            assert scaled == pytest.approx(base, rel=1e-6, abs=1e-9)


class TestObserverReport:
    def test_identical_session_scores_100(self):
        rng = np.random.default_rng(3)
        m = lm(rng.integers(0, 3, (6, 6, 6)))
        report = observer_report({"scan1": {"obs1": m, "obs2": m}}, ground="obs1")
        assert all(r.dice == 1.0 for r in report.rows)

    def test_erosion_oracle(self):
        from scipy import ndimage
        arr = np.zeros((12, 12, 6), np.int16)
        arr[3:9, 3:9, 1:5] = 1
        eroded = ndimage.binary_erosion((arr > 0)).astype(np.int16)
        report = observer_report(
            {"s": {"g": lm(arr, frozenset({0, 1})),
                   "o2": lm(eroded, frozenset({0, 1}))}}, ground="g")
        expected = dice(eroded > 0, arr > 0)
        row = [r for r in report.rows if r.region == "entire"][0]
        assert row.dice == expected

    def test_region_row_labels(self, tmp_path):
        rng = np.random.default_rng(4)
        m = lm(rng.integers(0, 3, (4, 4, 4)))
        report = observer_report({"s": {"g": m, "o": m}}, ground="g")
        report.to_csv(tmp_path / "t.csv")
        text = (tmp_path / "t.csv").read_text()
        for label in ("Inner Lumen", "Entire Aorta", "Outer Wall + ILT Only"):
            assert label in text

    def test_missing_ground_rejected(self):
        with pytest.raises(ValueError, match="missing ground"):
            observer_report({"s": {"o2": lm(np.zeros((2, 2, 2)))}}, ground="g")


def hu(mean, spread=5.0, seed=0):
    rng = np.random.default_rng(seed)
    vals = rng.normal(mean, spread, 6)
    return [HuStats(float(v) - 10, float(v), float(v) + 10,
                    5.0 + abs(float(v)) / 20, (1, 1, 1))
            for v in vals]


class TestCompareCohorts:
    def test_identical_cohorts_permutation_p_one(self):
        a = hu(-587.0)
        rows = compare_cohorts(a, list(a), test="permutation", n_perm=200)
        assert all(r["p_value"] == 1.0 for r in rows)

    def test_extreme_separation(self):
        rows = compare_cohorts(hu(0.0, 0.5, 1), hu(100.0, 0.5, 2))
        assert all(r["p_value"] < 0.001 for r in rows)

    def test_table_layout(self, tmp_path):
        from aortaseg.evaluation import cohort_table_csv
        rows = compare_cohorts(hu(-587.0, seed=3), hu(-568.0, seed=4))
        assert rows[1]["field"] == "Mean HU"
        assert rows[0]["ci_a"].startswith("[")
        cohort_table_csv(rows, tmp_path / "t.csv")
        header = (tmp_path / "t.csv").read_text().splitlines()[0]
        assert "95ci" in header and "p_value" in header

    def test_small_cohort_rejected(self):
        with pytest.raises(ValueError):
            compare_cohorts(hu(0.0)[:1], hu(0.0))


class TestMetricsReport:
    def test_aggregates_match_rows(self):
        report = MetricsReport()
        report.add("s1", {"entire": 0.9, "inner_lumen": 0.95}, "m")
        report.add("s2", {"entire": 0.8, "inner_lumen": 0.85}, "m")
        agg = report.aggregate()
        vals = [r.dice for r in report.rows if r.region == "entire"]
        assert agg[("m", "entire")][0] == pytest.approx(np.mean(vals))
        sem = np.std(vals, ddof=1) / np.sqrt(2)
        assert agg[("m", "entire")][1] == pytest.approx(sem)

    def test_mask_volume(self):
        m = LabelMask(np.ones((2, 3, 4), np.int16), (0.5, 1.0, 2.0))
        assert mask_volume_mm3(m) == 24 * 1.0
