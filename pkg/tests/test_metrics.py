import numpy as np
import pytest

from setcomp.labelsets import LabelSet, enumerate_label_sets
from setcomp.metrics import auc_rank, binary_accuracy, binomial_sigma, calibrate_threshold, labelset_report


def pair_count_auc(scores, labels):
    """O(n^2) oracle: wins + half-ties over all positive/negative pairs."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def ls(indices, k=5):
    return LabelSet.from_indices(indices, k)


class TestLabelsetReport:
    def test_all_rank_one_correct(self):
        truths = [ls([0]), ls([1, 2]), ls([0, 3, 4])]
        preds = [[t, ls([1]), ls([2])] for t in truths]
        rep = labelset_report(preds, truths)
        assert rep["exact"]["all"] == 1.0
        assert rep["top3"]["all"] == 1.0
        assert rep["size_accuracy"] == 1.0
        assert rep["exact"]["1"] == rep["exact"]["2"] == rep["exact"]["3"] == 1.0

    def test_size_accuracy_counts_matching_cardinality(self):
        truth = ls([0, 2])
        pred = ls([0, 1])  # wrong set, right size
        rep = labelset_report([[pred, ls([3]), ls([4])]], [truth])
        assert rep["exact"]["all"] == 0.0
        assert rep["size_accuracy"] == 1.0

    def test_four_case_hand_count(self):
        truths = [ls([0]), ls([1]), ls([0, 1]), ls([2, 3, 4])]
        preds = [
            [ls([0]), ls([1]), ls([2])],            # exact hit
            [ls([2]), ls([1]), ls([3])],            # top-3 hit at rank 2
            [ls([0, 2]), ls([1, 3]), ls([0, 1])],   # top-3 hit at rank 3, size right
            [ls([0]), ls([1]), ls([2])],            # complete miss, size wrong
        ]
        rep = labelset_report(preds, truths)
        assert rep["exact"]["all"] == pytest.approx(1 / 4)
        assert rep["top3"]["all"] == pytest.approx(3 / 4)
        assert rep["size_accuracy"] == pytest.approx(3 / 4)
        assert rep["exact"]["1"] == pytest.approx(1 / 2)
        assert rep["top3"]["2"] == pytest.approx(1.0)
        assert rep["exact"]["3"] == 0.0
        assert rep["counts"] == {"1": 2, "2": 1, "3": 1}

    def test_overall_exact_is_size_weighted_mean(self):
        rng = np.random.default_rng(0)
        cands = enumerate_label_sets(5, 3)
        truths = [cands[i] for i in rng.integers(len(cands), size=60)]
        preds = [[cands[i] for i in rng.integers(len(cands), size=3)] for _ in range(60)]
        rep = labelset_report(preds, truths)
        weighted = sum(rep["exact"][s] * rep["counts"][s] for s in rep["counts"]) / rep["n"]
        assert rep["exact"]["all"] == pytest.approx(weighted)
        assert rep["exact"]["all"] <= rep["top3"]["all"]

    def test_validation_errors(self):
        with pytest.raises(ValueError):
            labelset_report([], [])
        with pytest.raises(ValueError):
            labelset_report([[ls([0])]], [ls([0])])  # fewer than 3 ranks


class TestBinaryAccuracy:
    def test_perfect_and_inverted(self):
        labels = np.array([1, 1, 0, 0])
        assert binary_accuracy(np.array([0.9, 0.8, 0.1, 0.2]), labels) == 1.0
        assert binary_accuracy(np.array([0.1, 0.2, 0.9, 0.8]), labels) == 0.0

    def test_threshold_tie_counts_positive(self):
        labels = np.array([1, 0, 1, 0])
        scores = np.full(4, 0.5)
        assert binary_accuracy(scores, labels, threshold=0.5) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            binary_accuracy(np.zeros(3), np.zeros(4))


class TestAucRank:
    def test_extremes(self):
        labels = np.array([1, 1, 0, 0])
        assert auc_rank(np.array([0.9, 0.8, 0.1, 0.2]), labels) == 1.0
        assert auc_rank(np.array([0.1, 0.2, 0.9, 0.8]), labels) == 0.0

    def test_all_tied_is_half(self):
        assert auc_rank(np.full(6, 0.3), np.array([1, 0, 1, 0, 1, 0])) == 0.5

    def test_matches_pair_counting_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = 200
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                continue
            scores = np.round(rng.standard_normal(n), 2)  # rounding forces ties
            assert abs(auc_rank(scores, labels) - pair_count_auc(scores, labels)) < 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        scores = rng.standard_normal(100)
        labels = rng.integers(0, 2, size=100)
        base = auc_rank(scores, labels)
        assert auc_rank(3.0 * scores + 7.0, labels) == pytest.approx(base, abs=1e-12)
        assert auc_rank(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            auc_rank(np.array([0.1, 0.2]), np.array([1, 1]))


class TestCalibration:
    def test_recovers_separating_threshold(self):
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        labels = np.array([0, 0, 1, 1])
        thr = calibrate_threshold(scores, labels)
        assert 0.2 < thr < 0.8
        assert binary_accuracy(scores, labels, threshold=thr) == 1.0

    def test_binomial_sigma(self):
        assert binomial_sigma(0.5, 100) == pytest.approx(0.05)
        with pytest.raises(ValueError):
            binomial_sigma(0.5, 0)
