"""Entropy, similarity, and correlation measure tests with frozen values."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commloc.diversity import (
    InfluenceProfile,
    community_entropy,
    community_entropy_shannon,
    influence_entropy,
    influence_similarity,
    pearson_correlation,
)

sizes_strategy = st.lists(st.integers(min_value=1, max_value=500), min_size=1, max_size=12)


def truncate2(x: float) -> float:
    # reference values in the literature are printed truncated, not rounded
    return math.floor(x * 100.0) / 100.0


class TestCommunityEntropy:
    def test_skewed_sizes_low_order(self):
        got = community_entropy([1, 1, 10], alpha=0.5)
        want = 2.0 * math.log(2.0 * math.sqrt(1 / 12) + math.sqrt(10 / 12))
        assert math.isclose(got, want, abs_tol=1e-12)
        assert truncate2(got) == 0.79

    def test_skewed_sizes_high_order(self):
        got = community_entropy([1, 1, 10], alpha=10.0)
        want = math.log(2.0 * (1 / 12) ** 10 + (10 / 12) ** 10) / (1.0 - 10.0)
        assert math.isclose(got, want, abs_tol=1e-12)
        assert truncate2(got) == 0.20
        assert abs(got - 0.20) < 0.005

    def test_single_community_is_zero(self):
        for alpha in (0.5, 2.0, 10.0):
            assert community_entropy([37], alpha=alpha) == 0.0

    def test_uniform_is_log_k(self):
        for k in (2, 3, 7):
            for alpha in (0.5, 2.0, 10.0):
                assert math.isclose(community_entropy([5] * k, alpha=alpha), math.log(k), abs_tol=1e-12)

    def test_invalid_alpha(self):
        with pytest.raises(ValueError):
            community_entropy([1, 2], alpha=1.0)
        with pytest.raises(ValueError):
            community_entropy([1, 2], alpha=0.0)
        with pytest.raises(ValueError):
            community_entropy([1, 2], alpha=-3.0)

    def test_empty_sizes(self):
        with pytest.raises(ValueError):
            community_entropy([], alpha=10.0)

    def test_nonpositive_sizes(self):
        with pytest.raises(ValueError):
            community_entropy([3, 0], alpha=10.0)

    @given(sizes_strategy, st.integers(min_value=2, max_value=20))
    @settings(max_examples=80, deadline=None)
    def test_scale_invariance(self, sizes, k):
        a = community_entropy(sizes, alpha=10.0)
        b = community_entropy([s * k for s in sizes], alpha=10.0)
        assert math.isclose(a, b, abs_tol=1e-9)

    @given(sizes_strategy)
    @settings(max_examples=80, deadline=None)
    def test_monotone_non_increasing_in_alpha(self, sizes):
        lo = community_entropy(sizes, alpha=0.5)
        hi = community_entropy(sizes, alpha=10.0)
        assert hi <= lo + 1e-9
        if len(set(sizes)) > 1:
            assert hi < lo

    def test_shannon_mode_matches_alpha_limit(self):
        for sizes in ([1, 1, 10], [3, 4, 5], [2, 2]):
            shannon = community_entropy_shannon(sizes)
            for alpha in (1.0 - 1e-6, 1.0 + 1e-6):
                assert abs(community_entropy(sizes, alpha=alpha) - shannon) < 1e-4

    def test_shannon_validation(self):
        with pytest.raises(ValueError):
            community_entropy_shannon([])
        with pytest.raises(ValueError):
            community_entropy_shannon([1, -1])


class TestInfluenceEntropy:
    def test_even_split(self):
        got = influence_entropy([50, 50])
        assert math.isclose(got, math.log(2), abs_tol=1e-12)
        assert truncate2(got) == 0.69
        assert abs(got - 0.69) < 0.005

    def test_one_hot_is_zero(self):
        assert influence_entropy([0, 12, 0]) == 0.0

    def test_four_equal(self):
        assert math.isclose(influence_entropy([3, 3, 3, 3]), math.log(4), abs_tol=1e-12)

    def test_zero_counts_ignored(self):
        assert math.isclose(
            influence_entropy([10, 0, 10, 0]), influence_entropy([10, 10]), abs_tol=1e-12
        )

    def test_all_zero_raises(self):
        with pytest.raises(ValueError):
            influence_entropy([0, 0, 0])

    def test_negative_raises(self):
        with pytest.raises(ValueError):
            influence_entropy([1, -2])

    def test_accepts_profile(self):
        prof = InfluenceProfile("u", [5, 5])
        assert math.isclose(influence_entropy(prof), math.log(2), abs_tol=1e-12)
        assert prof.total == 10
        assert prof.n_influential == 2
        assert not prof.is_zero()

    @given(st.lists(st.integers(min_value=0, max_value=100), min_size=1, max_size=10))
    @settings(max_examples=80, deadline=None)
    def test_bounded_by_log_support(self, counts):
        support = sum(1 for c in counts if c > 0)
        if support == 0:
            return
        assert influence_entropy(counts) <= math.log(support) + 1e-9


class TestInfluenceSimilarity:
    def test_identical_vectors(self):
        assert math.isclose(influence_similarity([2, 3, 1], [2, 3, 1]), 1.0, abs_tol=1e-12)

    def test_disjoint_supports(self):
        assert influence_similarity([1, 0], [0, 1]) == 0.0

    def test_forty_five_degrees(self):
        assert abs(influence_similarity([1, 1], [1, 0]) - 0.7071) < 1e-4

    def test_zero_vector_raises(self):
        with pytest.raises(ValueError):
            influence_similarity([0, 0], [1, 0])

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            influence_similarity([1, 2], [1, 2, 3])

    def test_scale_invariance(self):
        a, b = [1, 4, 2], [2, 1, 1]
        assert math.isclose(
            influence_similarity(a, b),
            influence_similarity([10, 40, 20], b),
            abs_tol=1e-12,
        )


class TestPearsonCorrelation:
    def test_affine_positive(self):
        x = [1.0, 2.0, 3.0, 4.0]
        y = [2 * v + 1 for v in x]
        assert math.isclose(pearson_correlation(x, y), 1.0, abs_tol=1e-12)

    def test_negation(self):
        x = [1.0, 2.0, 5.0]
        assert math.isclose(pearson_correlation(x, [-v for v in x]), -1.0, abs_tol=1e-12)

    def test_half_correlated(self):
        assert math.isclose(pearson_correlation([1, 2, 3], [1, 3, 2]), 0.5, abs_tol=1e-12)

    def test_constant_raises(self):
        with pytest.raises(ValueError):
            pearson_correlation([1, 1, 1], [1, 2, 3])

    def test_too_short_raises(self):
        with pytest.raises(ValueError):
            pearson_correlation([1], [2])

    def test_symmetry(self):
        x, y = [1.0, 4.0, 2.0, 8.0], [3.0, 1.0, 5.0, 2.0]
        assert math.isclose(pearson_correlation(x, y), pearson_correlation(y, x), abs_tol=1e-15)

    def test_bounded(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            x = rng.normal(size=10)
            y = rng.normal(size=10)
            assert -1.0 - 1e-12 <= pearson_correlation(x, y) <= 1.0 + 1e-12
