"""Reliability binning, ECE/MCE, NLL and Brier against counting oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layergp.metrics import (
    MetricsReport,
    brier_binary,
    brier_multiclass,
    ece,
    mce,
    nll_binary,
    nll_multiclass,
    reliability,
    report_from_pairs,
)


def counting_oracle(pairs, bin_count):
    """Right-inclusive binning by direct interval comparison."""
    stats = []
    for m in range(1, bin_count + 1):
        lo, hi = (m - 1) / bin_count, m / bin_count
        members = [
            (c, y) for c, y in pairs if (lo < c <= hi) or (m == 1 and c == 0.0)
        ]
        if members:
            confs = [c for c, _ in members]
            corrs = [y for _, y in members]
            stats.append((len(members), sum(confs) / len(confs), sum(corrs) / len(corrs)))
        else:
            stats.append((0, 0.0, 0.0))
    return stats


class TestReliability:
    def test_single_pair_lands_in_bin_seven(self):
        d = reliability([(0.7, 1)], 10)
        assert d.bins[6].count == 1
        assert d.bins[6].accuracy == 1.0
        assert d.bins[6].mean_confidence == 0.7
        assert sum(b.count for b in d.bins) == 1

    def test_boundary_is_right_inclusive(self):
        d = reliability([(0.1, 0)], 10)
        assert d.bins[0].count == 1
        assert all(b.count == 0 for b in d.bins[1:])

    def test_zero_confidence_in_first_bin(self):
        d = reliability([(0.0, 0)], 10)
        assert d.bins[0].count == 1

    def test_one_lands_in_last_bin(self):
        d = reliability([(1.0, 1)], 15)
        assert d.bins[-1].count == 1

    def test_matches_counting_oracle(self, rng):
        pairs = [(float(c), int(y)) for c, y in zip(rng.random(100), rng.integers(0, 2, 100))]
        d = reliability(pairs, 10)
        for b, (count, conf, acc) in zip(d.bins, counting_oracle(pairs, 10)):
            assert b.count == count
            assert b.mean_confidence == pytest.approx(conf, abs=1e-12)
            assert b.accuracy == pytest.approx(acc, abs=1e-12)

    def test_counts_sum_to_n(self, rng):
        pairs = np.column_stack([rng.random(57), rng.integers(0, 2, 57)])
        assert reliability(pairs, 15).n == 57

    def test_merge_then_bin_equals_bin_then_merge(self, rng):
        a = np.column_stack([rng.random(30), rng.integers(0, 2, 30)])
        b = np.column_stack([rng.random(20), rng.integers(0, 2, 20)])
        merged = reliability(np.vstack([a, b]), 10)
        da, db = reliability(a, 10), reliability(b, 10)
        for m in range(10):
            assert merged.bins[m].count == da.bins[m].count + db.bins[m].count

    def test_rejects_empty_and_bad_inputs(self):
        with pytest.raises(ValueError, match="at least one"):
            reliability([], 10)
        with pytest.raises(ValueError, match="bin_count"):
            reliability([(0.5, 1)], 0)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            reliability([(1.5, 1)], 10)

    def test_table_rows_shape(self, rng):
        d = reliability([(0.42, 1), (0.9, 0)], 5)
        rows = d.table_rows()
        assert len(rows) == 5
        assert rows[2] == (0.4, 0.6, 1, 0.42, 1.0)


class TestEceMce:
    def test_perfectly_calibrated_bins(self):
        # within each bin, confidence equals empirical accuracy
        pairs = [(0.75, 1), (0.75, 1), (0.75, 1), (0.75, 0)]
        d = reliability(pairs, 4)
        assert ece(d) == pytest.approx(0.0, abs=1e-15)
        assert mce(d) == pytest.approx(0.0, abs=1e-15)

    def test_two_sample_hand_case(self):
        # one bin holding both: acc 0.5, conf 0.95 -> gap 0.45
        d = reliability([(0.95, 0), (0.95, 1)], 10)
        assert ece(d) == pytest.approx(0.45, abs=1e-12)
        assert mce(d) == pytest.approx(0.45, abs=1e-12)

    def test_weighted_average_hand_case(self):
        # bin 10: 3 pairs acc 1/3 conf 0.95; bin 5: 1 pair acc 1 conf 0.45
        pairs = [(0.95, 0), (0.95, 0), (0.95, 1), (0.45, 1)]
        d = reliability(pairs, 10)
        want_ece = (3 / 4) * abs(1 / 3 - 0.95) + (1 / 4) * abs(1.0 - 0.45)
        assert ece(d) == pytest.approx(want_ece, abs=1e-12)
        assert mce(d) == pytest.approx(abs(1 / 3 - 0.95), abs=1e-12)

    def test_empty_bins_skipped_by_mce(self):
        d = reliability([(0.95, 1)], 10)
        assert mce(d) == pytest.approx(0.05, abs=1e-12)

    def test_ece_never_exceeds_mce(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            pairs = np.column_stack([rng.random(n), rng.integers(0, 2, n)])
            d = reliability(pairs, int(rng.integers(1, 20)))
            assert ece(d) <= mce(d) + 1e-15

    @given(st.permutations(list(range(8))))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariance(self, order):
        base = [(0.1, 0), (0.25, 1), (0.5, 0), (0.55, 1), (0.7, 1), (0.8, 0), (0.95, 1), (1.0, 1)]
        shuffled = [base[i] for i in order]
        assert ece(reliability(shuffled, 10)) == ece(reliability(base, 10))


class TestNllBrier:
    def test_confident_correct(self):
        pairs = [(1.0 - 1e-7, 1)]
        assert nll_binary(pairs) == pytest.approx(1e-7, rel=1e-3)
        assert brier_binary(pairs) == pytest.approx(0.0, abs=1e-12)

    def test_coin_flip(self):
        assert nll_binary([(0.5, 1)]) == pytest.approx(math.log(2), abs=1e-12)
        assert nll_binary([(0.5, 0)]) == pytest.approx(math.log(2), abs=1e-12)
        assert brier_binary([(0.5, 1)]) == pytest.approx(0.25, abs=1e-12)

    def test_mixed_four_pair_hand_oracle(self):
        pairs = [(0.9, 1), (0.8, 0), (0.6, 1), (0.3, 0)]
        want_nll = -(math.log(0.9) + math.log(0.2) + math.log(0.6) + math.log(0.7)) / 4
        want_brier = ((0.1) ** 2 + (0.8) ** 2 + (0.4) ** 2 + (0.3) ** 2) / 4
        assert nll_binary(pairs) == pytest.approx(want_nll, abs=1e-12)
        assert brier_binary(pairs) == pytest.approx(want_brier, abs=1e-12)

    def test_clipping_keeps_nll_finite(self):
        assert np.isfinite(nll_binary([(0.0, 1), (1.0, 0)]))

    def test_multiclass_hand_case(self):
        softmax = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
        labels = np.array([0, 2])
        want_nll = -(math.log(0.7) + math.log(0.1)) / 2
        assert nll_multiclass(softmax, labels) == pytest.approx(want_nll, abs=1e-12)
        want_brier = (
            (0.3**2 + 0.2**2 + 0.1**2) + (0.1**2 + 0.8**2 + 0.9**2)
        ) / 2
        assert brier_multiclass(softmax, labels) == pytest.approx(want_brier, abs=1e-12)


class TestReport:
    def test_report_fields(self, rng):
        pairs = np.column_stack([rng.random(40), rng.integers(0, 2, 40)])
        rep = report_from_pairs(pairs, bin_count=10, clamp_count=3)
        assert rep.n == 40 and rep.bin_count == 10 and rep.clamp_count == 3
        assert 0 <= rep.ece <= rep.mce <= 1

    def test_record_format_is_stable(self):
        rep = MetricsReport(ece=0.1, mce=0.2, nll=0.3, brier=0.4, bin_count=15, clamp_count=0, n=7)
        rec = rep.to_record()
        assert rec == rep.to_record()
        assert rec.splitlines()[0] == "ece\t0.1"
        assert rec.endswith("n\t7\n")
