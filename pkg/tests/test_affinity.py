from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affinity_cl.affinity import (ConfusionStats, affinity_similarity,
                                  build_affinity_model, build_motion_families,
                                  family_temperature, merge_confusion,
                                  record_confusion, top_k_neighbors)
from affinity_cl.errors import ValidationError


def stats_from_counts(counts):
    counts = np.asarray(counts, dtype=np.int64)
    return ConfusionStats(counts.shape[0], counts,
                          int(counts.sum() - np.trace(counts)))


# ---------------------------------------------------------------------------
# brute-force oracle: explicit set operations, exact rational arithmetic
# ---------------------------------------------------------------------------

def brute_force_pipeline(counts, k, n_a):
    c = len(counts)
    neighbors = []
    for i in range(c):
        candidates = [(j, counts[i][j]) for j in range(c)
                      if j != i and counts[i][j] > 0]
        candidates.sort(key=lambda pair: (-pair[1], pair[0]))
        neighbors.append([j for j, _ in candidates[:k]])
    indicator = [[1 if j in neighbors[i] else 0 for j in range(c)]
                 for i in range(c)]
    w = [[Fraction(0)] * c for _ in range(c)]
    for i in range(c):
        if not neighbors[i]:
            continue
        for j in range(c):
            if j == i:
                continue
            shared = len(set(neighbors[i]) & set(neighbors[j]))
            w[i][j] = (Fraction(indicator[i][j], 2)
                       + Fraction(shared, len(neighbors[i])))
    threshold = Fraction(n_a, k)
    families = [[j for j in range(c) if j != i and w[i][j] > threshold]
                for i in range(c)]
    return neighbors, indicator, w, families


class TestRecordConfusion:
    def test_correct_prediction_leaves_counts_unchanged(self):
        stats = record_confusion(ConfusionStats.empty(4), [2], [2])
        assert stats.counts.sum() == 0
        assert stats.total_recorded == 0

    def test_repeated_misclassification_accumulates(self):
        stats = record_confusion(ConfusionStats.empty(5), [1, 1], [3, 3])
        assert stats.counts[1, 3] == 2
        assert stats.total_recorded == 2

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValidationError, match="out of range"):
            record_confusion(ConfusionStats.empty(3), [0], [7])

    def test_unequal_lengths_rejected(self):
        with pytest.raises(ValidationError):
            record_confusion(ConfusionStats.empty(3), [0, 1], [1])

    @given(st.integers(3, 8), st.integers(0, 40), st.integers(0, 40),
           st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_merge_equals_single_pass_recording(self, c, n1, n2, seed):
        rng = np.random.default_rng(seed)
        true = list(rng.integers(0, c, size=n1 + n2))
        pred = list(rng.integers(0, c, size=n1 + n2))
        single = record_confusion(ConfusionStats.empty(c), true, pred)
        merged = merge_confusion(
            record_confusion(ConfusionStats.empty(c), true[:n1], pred[:n1]),
            record_confusion(ConfusionStats.empty(c), true[n1:], pred[n1:]))
        np.testing.assert_array_equal(single.counts, merged.counts)
        assert single.total_recorded == merged.total_recorded


class TestTopKNeighbors:
    def test_ranked_by_count(self):
        stats = stats_from_counts([[0, 5, 3, 0, 7],
                                   [0, 0, 0, 0, 0],
                                   [0, 0, 0, 0, 0],
                                   [0, 0, 0, 0, 0],
                                   [0, 0, 0, 0, 0]])
        assert top_k_neighbors(stats, 0, 2) == [4, 1]

    def test_zero_row_gives_empty_set(self):
        assert top_k_neighbors(ConfusionStats.empty(4), 0, 3) == []

    def test_ties_break_to_smaller_index(self):
        stats = stats_from_counts([[0, 2, 2, 2, 0]] + [[0] * 5] * 4)
        assert top_k_neighbors(stats, 0, 2) == [1, 2]

    def test_diagonal_never_included(self):
        counts = np.full((4, 4), 9, dtype=np.int64)
        stats = stats_from_counts(counts)
        assert 1 not in top_k_neighbors(stats, 1, 3)

    def test_k_must_be_positive(self):
        with pytest.raises(ValidationError):
            top_k_neighbors(ConfusionStats.empty(4), 0, 0)


class TestAffinitySimilarity:
    def test_half_plus_shared_over_size(self):
        # rows engineered so N(0) = {1, 2, 3} and N(1) = {0, 2, 3}
        stats = stats_from_counts([[0, 5, 4, 3, 0],
                                   [5, 0, 4, 3, 0],
                                   [0, 0, 0, 0, 0],
                                   [0, 0, 0, 0, 0],
                                   [0, 0, 0, 0, 0]])
        model = build_affinity_model(stats, k=3, n_a=1)
        assert model.neighbor_sets[0] == (1, 2, 3)
        assert model.neighbor_sets[1] == (0, 2, 3)
        expected = float(Fraction(1, 2) + Fraction(2, 3))
        assert affinity_similarity(model, 0, 1) == pytest.approx(expected,
                                                                 abs=1e-15)
        assert model.w[0, 1] == affinity_similarity(model, 0, 1)

    def test_disjoint_neighbor_sets_give_zero(self):
        stats = stats_from_counts([[0, 9, 0, 0],
                                   [0, 0, 0, 0],
                                   [0, 0, 0, 9],
                                   [0, 0, 0, 0]])
        model = build_affinity_model(stats, k=2, n_a=1)
        assert affinity_similarity(model, 0, 2) == 0.0

    def test_maximal_overlap_between_mutual_neighbors(self):
        # A class is never its own neighbor, so with j in N(i) at most
        # |N(i)| - 1 neighbors can be shared: the attainable maximum is
        # 1/2 + (n - 1)/n, approaching (but never reaching) the 1.5 cap.
        stats = stats_from_counts([[0, 6, 5, 4],
                                   [6, 0, 5, 4],
                                   [0, 0, 0, 0],
                                   [0, 0, 0, 0]])
        model = build_affinity_model(stats, k=3, n_a=1)
        got = affinity_similarity(model, 0, 1)
        assert got == pytest.approx(0.5 + 2.0 / 3.0, abs=1e-15)
        assert got <= 1.5

    def test_self_affinity_rejected(self):
        model = build_affinity_model(ConfusionStats.empty(3), k=2, n_a=1)
        with pytest.raises(ValidationError, match="self-affinity"):
            affinity_similarity(model, 1, 1)

    def test_empty_neighbor_set_gives_zero(self):
        model = build_affinity_model(ConfusionStats.empty(3), k=2, n_a=1)
        assert affinity_similarity(model, 0, 1) == 0.0


class TestMotionFamilies:
    def test_membership_is_strict_threshold(self):
        w = np.zeros((3, 3))
        w[0, 1] = 0.5   # above 4/10
        w[0, 2] = 0.3   # below 4/10
        families, sizes = build_motion_families(w, n_a=4, k=10)
        assert families[0] == [1]
        assert sizes[0] == 1

    def test_value_at_threshold_excluded(self):
        w = np.zeros((2, 2))
        w[0, 1] = 0.4
        families, _ = build_motion_families(w, n_a=4, k=10)
        assert families[0] == []

    def test_zero_affinities_give_empty_families(self):
        families, sizes = build_motion_families(np.zeros((4, 4)), n_a=2, k=5)
        assert all(f == [] for f in families)
        assert sizes == [0, 0, 0, 0]

    def test_invalid_threshold_rejected(self):
        with pytest.raises(ValidationError):
            build_motion_families(np.zeros((2, 2)), n_a=0, k=5)
        with pytest.raises(ValidationError):
            build_motion_families(np.zeros((2, 2)), n_a=6, k=5)


class TestFamilyTemperature:
    @pytest.mark.parametrize("size,expected", [
        (0, 0.1), (8, 0.1), (10, 0.1), (11, 0.5), (12, 0.5), (20, 0.5),
        (21, 1.0), (25, 1.0), (30, 1.0),
    ])
    def test_schedule_at_k_ten(self, size, expected):
        assert family_temperature(size, 10) == expected

    def test_step_boundaries_for_small_k(self):
        assert family_temperature(3, 3) == 0.1
        assert family_temperature(4, 3) == 0.5
        assert family_temperature(6, 3) == 0.5
        assert family_temperature(7, 3) == 1.0

    def test_negative_size_rejected(self):
        with pytest.raises(ValidationError):
            family_temperature(-1, 10)


class TestPipelineAgainstBruteForce:
    def test_shared_neighbor_counts_are_symmetric(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            c = int(rng.integers(2, 13))
            counts = rng.integers(0, 6, size=(c, c))
            np.fill_diagonal(counts, 0)
            model = build_affinity_model(stats_from_counts(counts),
                                         k=int(rng.integers(1, 6)), n_a=1)
            shared = model.indicator @ model.indicator.T
            np.testing.assert_array_equal(shared, shared.T)

    def test_w_bounds_and_neighbor_floor(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            c = int(rng.integers(3, 13))
            counts = rng.integers(0, 10, size=(c, c))
            np.fill_diagonal(counts, 0)
            k = int(rng.integers(1, 6))
            model = build_affinity_model(stats_from_counts(counts), k=k, n_a=1)
            assert np.all(model.w >= 0.0)
            assert np.all(model.w <= 1.5 + 1e-15)
            for i, neighbors in enumerate(model.neighbor_sets):
                for j in neighbors:
                    assert model.w[i, j] >= 0.5

    def test_matches_exact_set_operations(self):
        rng = np.random.default_rng(31)
        for _ in range(200):
            c = int(rng.integers(2, 13))
            density = rng.random()
            counts = np.where(rng.random((c, c)) < density,
                              rng.integers(1, 30, size=(c, c)), 0)
            np.fill_diagonal(counts, 0)
            k = int(rng.integers(1, 6))
            n_a = int(rng.integers(1, k + 1))
            model = build_affinity_model(stats_from_counts(counts), k=k, n_a=n_a)
            neighbors, indicator, w, families = brute_force_pipeline(
                counts.tolist(), k, n_a)
            assert [list(s) for s in model.neighbor_sets] == neighbors
            np.testing.assert_array_equal(model.indicator, np.array(indicator))
            for i in range(c):
                for j in range(c):
                    if i != j:
                        assert abs(model.w[i, j] - float(w[i][j])) <= 1e-12
            assert [list(f) for f in model.families] == families
