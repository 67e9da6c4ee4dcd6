"""Nearest-centroid classifier and its distance-based confidence."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metricemg.ncc import (
    CentroidSet,
    compute_centroids,
    confidence,
    distances,
    predict_batch,
    proximity_scores,
)
from metricemg.tensor import ShapeError


class TestConfidence:
    def test_equidistant_is_uniform(self):
        for c in range(2, 9):
            res = confidence(np.full(c, 3.7))
            np.testing.assert_allclose(res.scores, 1.0 / c, atol=1e-15)

    def test_two_class_hand_case(self):
        res = confidence(np.array([0.0, 10.0]))
        e = math.e
        np.testing.assert_allclose(res.scores, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
        assert res.predicted == 0

    def test_all_zero_distances_are_degenerate_uniform(self):
        res = confidence(np.zeros(4))
        assert res.degenerate
        np.testing.assert_allclose(res.scores, 0.25)

    def test_proximity_sums_to_c_minus_one(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            c = rng.integers(2, 12)
            d = rng.exponential(5.0, c)
            assert proximity_scores(d).sum() == pytest.approx(c - 1, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(2, 10), elements=st.floats(0.0, 1e6)))
    def test_scores_form_distribution_ordered_by_distance(self, d):
        res = confidence(d)
        assert res.scores.sum() == pytest.approx(1.0)
        assert np.all(res.scores > 0)
        # closer centroid never scores lower
        order = np.argsort(d, kind="stable")
        assert np.all(np.diff(res.scores[order]) <= 1e-12)

    def test_rejects_short_vectors(self):
        with pytest.raises(ValueError):
            confidence(np.array([1.0]))


class TestCentroids:
    def test_compute_and_distance(self):
        emb = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 4.0], [0.0, 6.0]])
        cents = compute_centroids(emb, [0, 0, 1, 1])
        np.testing.assert_allclose(cents.centroids, [[1.0, 0.0], [0.0, 5.0]])
        np.testing.assert_allclose(distances(np.array([1.0, 5.0]), cents), [5.0, 1.0])

    def test_missing_class_raises(self):
        with pytest.raises(ValueError):
            compute_centroids(np.zeros((2, 3)), [0, 0], class_ids=[0, 1])

    def test_dimension_mismatch(self):
        cents = compute_centroids(np.zeros((2, 3)), [0, 1])
        with pytest.raises(ShapeError):
            distances(np.zeros(4), cents)

    def test_ties_go_to_lowest_index(self):
        cents = CentroidSet(np.array([7, 3]), np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1, 1]))
        assert predict_batch(np.zeros((1, 2)), cents).predicted[0] == 7

    def test_add_class_leaves_old_predictions(self):
        rng = np.random.default_rng(1)
        emb = rng.normal(size=(60, 5)) + np.repeat(np.eye(5)[:3] * 10, 20, axis=0)
        labels = np.repeat([0, 1, 2], 20)
        base = compute_centroids(emb, labels)
        new = rng.normal(size=(10, 5)) + np.eye(5)[4] * 10
        extended = base.add_class(4, new)
        np.testing.assert_array_equal(extended.centroids[:3], base.centroids)
        assert np.all(predict_batch(new, extended).predicted == 4)
        with pytest.raises(ValueError):
            extended.add_class(4, new)
        np.testing.assert_array_equal(extended.subset([0, 1, 2]).centroids, base.centroids)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(2)
        cents = compute_centroids(rng.normal(size=(30, 4)), np.arange(30) % 3)
        x = rng.normal(size=(5, 4))
        batch = predict_batch(x, cents)
        for i in range(5):
            single = confidence(distances(x[i], cents))
            np.testing.assert_allclose(batch.scores[i], single.scores)
            assert batch.predicted[i] == cents.class_ids[single.predicted]
