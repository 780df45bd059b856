import math

import numpy as np
import pytest

from setcomp.labelsets import Episode, LabelSet, canonical_elements, enumerate_label_sets, is_subset, union


class TestEnumeration:
    def test_headline_counts(self):
        assert len(enumerate_label_sets(5, 3)) == 25
        assert len(enumerate_label_sets(5, 1)) == 5
        assert len(enumerate_label_sets(6, 3)) == 41  # 6 + 15 + 20

    def test_counts_match_binomial_sums_exhaustively(self):
        for k in range(1, 11):
            for cap in range(1, k + 1):
                expected = sum(math.comb(k, size) for size in range(1, cap + 1))
                assert len(enumerate_label_sets(k, cap)) == expected

    def test_canonical_order_is_strict_total_order(self):
        for k, cap in [(5, 3), (7, 7), (4, 2)]:
            sets = enumerate_label_sets(k, cap)
            keys = [(len(s), s.mask) for s in sets]
            assert keys == sorted(keys)
            assert len(set(keys)) == len(keys)

    def test_all_sets_nonempty_and_within_cap(self):
        sets = enumerate_label_sets(6, 2)
        assert all(1 <= len(s) <= 2 for s in sets)

    @pytest.mark.parametrize("k,cap", [(0, 1), (17, 3), (5, 0), (5, 6)])
    def test_out_of_range_arguments(self, k, cap):
        with pytest.raises(ValueError):
            enumerate_label_sets(k, cap)


class TestLabelSet:
    def test_canonical_elements(self):
        assert canonical_elements(LabelSet(0b00101, 5)) == [0, 2]
        assert canonical_elements(LabelSet(0, 5)) == []
        assert canonical_elements(LabelSet(0b11111, 5)) == [0, 1, 2, 3, 4]

    def test_mask_out_of_range(self):
        with pytest.raises(ValueError):
            LabelSet(1 << 5, 5)
        with pytest.raises(ValueError):
            LabelSet(-1, 5)
        with pytest.raises(ValueError):
            LabelSet(0, 17)

    def test_report_serialization(self):
        assert str(LabelSet(0b10101, 5)) == "[0,2,4]"
        assert str(LabelSet(0, 3)) == "[]"

    def test_from_indices_roundtrip(self):
        t = LabelSet.from_indices([3, 1], 5)
        assert t.mask == 0b01010
        with pytest.raises(ValueError):
            LabelSet.from_indices([5], 5)

    def test_len_and_contains(self):
        t = LabelSet(0b01101, 5)
        assert len(t) == 3
        assert 0 in t and 2 in t and 1 not in t


class TestSetOps:
    def test_subset_examples(self):
        b = LabelSet.from_indices([1, 3], 5)
        assert is_subset(LabelSet.from_indices([1], 5), b)
        assert not is_subset(LabelSet.from_indices([2], 5), b)
        assert is_subset(b, b)

    def test_union_examples(self):
        a = LabelSet.from_indices([1], 5)
        b = LabelSet.from_indices([2], 5)
        assert union(a, b) == LabelSet.from_indices([1, 2], 5)
        assert union(a, a) == a
        assert union(a, LabelSet(0, 5)) == a

    def test_universe_mismatch(self):
        with pytest.raises(ValueError):
            union(LabelSet(1, 4), LabelSet(1, 5))
        with pytest.raises(ValueError):
            is_subset(LabelSet(1, 4), LabelSet(1, 5))

    def test_union_algebra_random_masks(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            k = int(rng.integers(1, 13))
            a, b, c = (LabelSet(int(rng.integers(1 << k)), k) for _ in range(3))
            assert union(a, b) == union(b, a)
            assert union(union(a, b), c) == union(a, union(b, c))
            assert union(a, a) == a

    def test_mutual_subset_iff_equal(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            k = int(rng.integers(1, 13))
            a = LabelSet(int(rng.integers(1 << k)), k)
            b = LabelSet(int(rng.integers(1 << k)), k)
            assert (is_subset(a, b) and is_subset(b, a)) == (a == b)


class TestEpisode:
    def test_distinct_classes_required(self):
        with pytest.raises(ValueError):
            Episode((3, 3, 4), (0, 0, 0))

    def test_one_exemplar_per_class(self):
        with pytest.raises(ValueError):
            Episode((1, 2, 3), (0, 0))

    def test_k(self):
        assert Episode((10, 20), (0, 1)).k == 2
