"""Rank vectors, rank distances, and the edit-distance baseline."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melodist.encoding import HOLD, note, sequence
from melodist.rankdist import (
    concordance_counts,
    concordance_counts_quadratic,
    edit_distance,
    kendall_dissimilarity,
    kendall_tau,
    rank_vector,
    spearman_rho,
    truncated_spearman,
)
from melodist.errors import BadOrder, LengthMismatch, NonFinite, TooShort

finite_vectors = st.lists(
    st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
    min_size=2,
    max_size=40,
)


class TestRankVector:
    def test_basic(self):
        assert list(rank_vector([3, 1, 2])) == [1, 3, 2]

    def test_tie_broken_by_index(self):
        assert list(rank_vector([0.5, 0.5, 0.1])) == [1, 2, 3]

    def test_singleton(self):
        assert list(rank_vector([7])) == [1]

    def test_rejects_non_finite(self):
        with pytest.raises(NonFinite):
            rank_vector([1.0, np.nan])
        with pytest.raises(NonFinite):
            rank_vector([np.inf, 0.0])

    @given(finite_vectors)
    @settings(max_examples=200, deadline=None)
    def test_is_permutation_sorting_values_descending(self, values):
        x = np.array(values)
        perm = rank_vector(x)
        assert sorted(perm) == list(range(1, len(values) + 1))
        picked = x[perm - 1]
        assert all(picked[i] >= picked[i + 1] for i in range(len(picked) - 1))


class TestSpearman:
    def test_zero_on_identical(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.normal(size=17)
            assert spearman_rho(x, x) == 0.0

    def test_worked_example(self):
        # rank vectors [1,3,2] vs [3,2,1]: sum of squared diffs = 4+1+1
        assert spearman_rho([3, 1, 2], [1, 2, 3]) == pytest.approx(np.sqrt(6))

    def test_two_element_swap(self):
        assert spearman_rho([1, 2], [2, 1]) == pytest.approx(np.sqrt(2))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            spearman_rho([1, 2], [1, 2, 3])

    @given(finite_vectors, st.randoms(use_true_random=False))
    @settings(max_examples=150, deadline=None)
    def test_symmetry_and_upper_bound(self, values, rnd):
        x = np.array(values)
        y = np.array(values)
        rnd.shuffle(y)
        assert spearman_rho(x, y) == spearman_rho(y, x)
        n = len(values)
        bound = np.sqrt(sum((n + 1 - 2 * i) ** 2 for i in range(1, n + 1)))
        assert spearman_rho(x, y) <= bound + 1e-12


class TestTruncatedSpearman:
    def test_order_one_example(self):
        assert truncated_spearman([3, 1, 2], [1, 2, 3], 1) == pytest.approx(2.0)

    def test_full_order_equals_spearman(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x, y = rng.normal(size=(2, 23))
            assert truncated_spearman(x, y, 23) == spearman_rho(x, y)

    def test_zero_on_identical_any_order(self):
        x = np.arange(9.0)
        for l in range(1, 10):
            assert truncated_spearman(x, x, l) == 0.0

    def test_monotone_in_order(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(2, 15))
        values = [truncated_spearman(x, y, l) for l in range(1, 16)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_bad_order(self):
        with pytest.raises(BadOrder):
            truncated_spearman([1, 2], [2, 1], 0)
        with pytest.raises(BadOrder):
            truncated_spearman([1, 2], [2, 1], 3)


class TestKendall:
    def test_identical_ranks_give_one(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=31)
        assert kendall_tau(x, x) == 1.0
        assert kendall_dissimilarity(x, x) == 0.0

    def test_worked_example(self):
        # oracle over the 3 pairs of rank vectors [1,3,2] and [3,2,1]
        c, d = concordance_counts_quadratic([3, 1, 2], [1, 2, 3])
        assert (c, d) == (1, 2)
        assert kendall_tau([3, 1, 2], [1, 2, 3]) == pytest.approx(-1 / 3)

    def test_reversal_gives_minus_one(self):
        x = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
        assert kendall_tau(x, x[::-1]) == -1.0

    def test_too_short(self):
        with pytest.raises(TooShort):
            kendall_tau([1.0], [2.0])

    @given(finite_vectors, finite_vectors)
    @settings(max_examples=200, deadline=None)
    def test_fast_counts_match_quadratic_oracle(self, xs, ys):
        n = min(len(xs), len(ys))
        x, y = np.array(xs[:n]), np.array(ys[:n])
        assert concordance_counts(x, y) == concordance_counts_quadratic(x, y)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            x, y = rng.normal(size=(2, 16))
            t = kendall_tau(x, y)
            assert t == kendall_tau(y, x)
            assert -1.0 <= t <= 1.0


class TestMonotoneInvariance:
    @given(finite_vectors, finite_vectors)
    @settings(max_examples=150, deadline=None)
    def test_strictly_increasing_map_leaves_distances_unchanged(self, xs, ys):
        n = min(len(xs), len(ys))
        x, y = np.array(xs[:n]), np.array(ys[:n])
        g = lambda v: v**3 + 2 * v  # strictly increasing on all of R
        assert list(rank_vector(g(x))) == list(rank_vector(x))
        assert spearman_rho(g(x), y) == spearman_rho(x, y)
        assert truncated_spearman(x, g(y), max(1, n // 2)) == truncated_spearman(
            x, y, max(1, n // 2)
        )
        assert kendall_tau(g(x), g(y)) == kendall_tau(x, y)


class TestEditDistance:
    def test_identity(self):
        s = sequence(["C4", "HOLD", "D4", "HOLD"])
        assert edit_distance(s, s) == 0

    def test_single_substitution(self):
        a = sequence(["C4", "HOLD", "D4", "HOLD"])
        b = sequence(["C4", "HOLD", "HOLD", "HOLD"])
        assert edit_distance(a, b) == 1

    def test_hand_computed_table(self):
        a = sequence(["C4", "D4"])
        b = sequence(["E5", "F5", "G5"])
        assert edit_distance(a, b) == 3

    def test_symmetry_and_bound(self):
        rng = np.random.default_rng(5)
        pool = [note(60 + i) for i in range(12)] + [HOLD]
        for _ in range(100):
            a = tuple(pool[i] for i in rng.integers(0, len(pool), size=9))
            b = tuple(pool[i] for i in rng.integers(0, len(pool), size=13))
            d = edit_distance(a, b)
            assert d == edit_distance(b, a)
            assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))

    def test_equal_length_value_range(self):
        # on equal-length pairs the DP can produce at most L+1 distinct values
        rng = np.random.default_rng(6)
        pool = [note(60 + i) for i in range(5)]
        length = 8
        seen = set()
        for _ in range(300):
            a = tuple(pool[i] for i in rng.integers(0, len(pool), size=length))
            b = tuple(pool[i] for i in rng.integers(0, len(pool), size=length))
            seen.add(edit_distance(a, b))
        assert len(seen) <= length + 1
        assert all(0 <= v <= length for v in seen)
