# pylint: disable="missing-class-docstring", "missing-function-docstring"
import math
import os
import pathlib
import tempfile
import unittest
from decimal import Decimal, localcontext
from typing import List
from unittest import mock

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from TsfLab.errors import WindowError
from TsfLab.neighborhood import (
    THREADS_VARIABLE,
    build_cache,
    gaussian_weights,
    is_degenerate,
    neighbor_distance,
    neighborhood_score,
    neighborhood_scores,
    pairwise_distances,
    thread_count,
    weighted_pearson,
)


def decimal_pearson(x: List[int], y: List[int], l_in: int, sigma: int) -> Decimal:
    with localcontext() as context:
        context.prec = 60
        omega = [
            (-(Decimal(tau - l_in) ** 2) / (2 * Decimal(sigma) ** 2)).exp()
            for tau in range(len(x))
        ]
        total = sum(omega)
        mean_x = sum(w * xi for w, xi in zip(omega, x)) / total
        mean_y = sum(w * yi for w, yi in zip(omega, y)) / total
        covariance = sum(w * (xi - mean_x) * (yi - mean_y) for w, xi, yi in zip(omega, x, y))
        variance_x = sum(w * (xi - mean_x) ** 2 for w, xi in zip(omega, x))
        variance_y = sum(w * (yi - mean_y) ** 2 for w, yi in zip(omega, y))
        return covariance / (variance_x * variance_y).sqrt()


class TestGaussianWeights(unittest.TestCase):
    def test_peak_at_first_future_step(self) -> None:
        weights = gaussian_weights(12, 12)
        self.assertEqual(len(weights), 24)
        self.assertEqual(weights.omega[12], 1.0)
        self.assertEqual(int(np.argmax(weights.omega)), 12)

    def test_scalar_value(self) -> None:
        weights = gaussian_weights(2, 2, 2.0)
        self.assertAlmostEqual(weights.omega[0], math.exp(-0.5), places=15)
        self.assertAlmostEqual(weights.omega[0], 0.606531, places=6)

    def test_infinite_sigma_is_uniform(self) -> None:
        self.assertTrue(np.all(gaussian_weights(3, 4, math.inf).omega == 1.0))

    def test_sigma_must_be_positive(self) -> None:
        self.assertRaises(ValueError, gaussian_weights, 3, 4, 0.0)


class TestWeightedPearson(unittest.TestCase):
    def setUp(self) -> None:
        self.weights = gaussian_weights(2, 2, 2.0)

    def test_identity(self) -> None:
        window = np.array([0.3, -1.0, 2.0, 0.5])
        self.assertAlmostEqual(weighted_pearson(window, window, self.weights), 1.0, places=12)
        self.assertAlmostEqual(neighbor_distance(window, window, self.weights), 0.0, places=12)

    def test_reflection(self) -> None:
        window = np.array([0.3, -1.0, 2.0, 0.5])
        reflected = -window + 2.0 * window.mean()
        self.assertAlmostEqual(weighted_pearson(window, reflected, self.weights), -1.0, places=12)
        self.assertAlmostEqual(neighbor_distance(window, reflected, self.weights), 2.0, places=12)

    def test_matches_extended_precision(self) -> None:
        expected = decimal_pearson([0, 1, 2, 3], [0, 1, 2, 5], 2, 2)
        actual = weighted_pearson(np.array([0.0, 1, 2, 3]), np.array([0.0, 1, 2, 5]), self.weights)
        self.assertAlmostEqual(actual, float(expected), delta=1e-9)

    def test_constant_window_is_maximally_distant(self) -> None:
        constant = np.full(4, 3.0)
        self.assertTrue(is_degenerate(constant, self.weights))
        self.assertEqual(weighted_pearson(constant, np.arange(4.0), self.weights), -1.0)
        self.assertEqual(neighbor_distance(constant, constant, self.weights), 2.0)

    def test_length_mismatch(self) -> None:
        self.assertRaises(WindowError, weighted_pearson, np.zeros(3), np.zeros(3), self.weights)

    @settings(max_examples=100, deadline=None)
    @given(
        seed=st.integers(min_value=0, max_value=2**32 - 1),
        scale=st.floats(min_value=1e-3, max_value=1e3),
        shift=st.floats(min_value=-1e3, max_value=1e3),
    )
    def test_affine_invariance_and_symmetry(self, seed: int, scale: float, shift: float) -> None:
        weights = gaussian_weights(12, 12, 2.0)
        rng = np.random.default_rng(seed)
        x_i, x_j = rng.normal(size=(2, 24))
        r = weighted_pearson(x_i, x_j, weights)
        self.assertAlmostEqual(r, weighted_pearson(x_j, x_i, weights), delta=1e-12)
        self.assertAlmostEqual(r, weighted_pearson(scale * x_i + shift, x_j, weights), delta=1e-9)
        self.assertTrue(0.0 <= neighbor_distance(x_i, x_j, weights) <= 2.0)


class TestPairwiseDistances(unittest.TestCase):
    def test_agrees_with_pairwise_calls(self) -> None:
        weights = gaussian_weights(3, 2)
        windows = np.random.default_rng(1).normal(size=(7, 5))
        windows[4] = 1.0
        distances, degenerate = pairwise_distances(windows, weights)
        self.assertEqual(np.flatnonzero(degenerate).tolist(), [4])
        np.testing.assert_array_equal(distances, distances.T)
        for i in range(7):
            for j in range(7):
                if i == j and degenerate[i]:
                    continue
                self.assertAlmostEqual(
                    distances[i, j], neighbor_distance(windows[i], windows[j], weights), places=12
                )


class TestBuildCache(unittest.TestCase):
    def brute_force(self, windows: np.ndarray, l_in: int, k: int):
        weights = gaussian_weights(l_in, windows.shape[1] - l_in)
        n_windows = windows.shape[0]
        indices, distances = [], []
        for i in range(n_windows):
            candidates = sorted(
                (neighbor_distance(windows[i], windows[j], weights), j)
                for j in range(n_windows)
                if j != i
            )[:k]
            distances.append([distance for distance, _ in candidates])
            indices.append([j for _, j in candidates])
        return np.array(indices), np.array(distances)

    def test_identical_windows(self) -> None:
        windows = np.tile(np.array([0.0, 1.0, 3.0, 2.0]), (3, 1))
        cache = build_cache([windows], 2, 2)
        for i in range(3):
            self.assertEqual(sorted(cache.indices[0, i].tolist()), [j for j in range(3) if j != i])
        np.testing.assert_allclose(cache.distances[0], 0.0, atol=1e-12)

    def test_matches_brute_force(self) -> None:
        rng = np.random.default_rng(7)
        for n_windows in (20, 50):
            channels = [rng.normal(size=(n_windows, 6)) for _ in range(2)]
            cache = build_cache(channels, 4, 5, threads=2)
            for channel, windows in enumerate(channels):
                indices, distances = self.brute_force(windows, 4, 5)
                np.testing.assert_array_equal(cache.indices[channel], indices)
                np.testing.assert_allclose(cache.distances[channel], distances, atol=1e-12)

    def test_distances_are_symmetric(self) -> None:
        windows = np.random.default_rng(3).normal(size=(12, 6))
        cache = build_cache([windows], 3, 11)
        lookup = {}
        for i in range(12):
            for j, distance in zip(cache.indices[0, i], cache.distances[0, i]):
                lookup[(i, int(j))] = distance
        for (i, j), distance in lookup.items():
            self.assertEqual(distance, lookup[(j, i)])

    def test_too_few_windows(self) -> None:
        self.assertRaises(WindowError, build_cache, [np.zeros((3, 4))], 2, 3)

    def test_truncated_equals_a_smaller_build(self) -> None:
        channels = [np.random.default_rng(8).normal(size=(30, 6)) for _ in range(2)]
        truncated = build_cache(channels, 4, 9).truncated(4)
        fresh = build_cache(channels, 4, 4)
        self.assertEqual(truncated.k_max, 4)
        np.testing.assert_array_equal(truncated.indices, fresh.indices)
        np.testing.assert_array_equal(truncated.distances, fresh.distances)
        self.assertRaises(ValueError, fresh.truncated, 5)

    def test_dump(self) -> None:
        cache = build_cache([np.random.default_rng(0).normal(size=(6, 4))], 2, 2)
        with tempfile.TemporaryDirectory() as folder:
            path = pathlib.Path(folder) / "neighbor_cache.json"
            cache.dump(path)
            self.assertIn('"k_max": 2', path.read_text(encoding="utf-8"))


def reference_scores(windows: np.ndarray, omega: np.ndarray, k: int) -> np.ndarray:
    """Mean distance to the k nearest other windows, one row at a time."""
    omega = omega / omega.sum()
    centered = windows - (windows @ omega)[:, np.newaxis]
    variances = (centered**2) @ omega
    scores = []
    for i in range(windows.shape[0]):
        correlation = (centered * centered[i]) @ omega / np.sqrt(variances * variances[i])
        distances = np.delete(1.0 - correlation, i)
        scores.append(np.sort(distances)[:k].mean())
    return np.array(scores)


class TestNeighborhoodScores(unittest.TestCase):
    def test_full_pool_matches_brute_force(self) -> None:
        rng = np.random.default_rng(9)
        weights = gaussian_weights(12, 12)
        for _ in range(50):
            n_windows = int(rng.integers(30, 201))
            windows = rng.normal(size=(n_windows, 24))
            cache = build_cache([windows], 12, 20)
            scores = neighborhood_scores(cache, 0, np.ones(n_windows, dtype=bool), 20)
            expected = reference_scores(windows, weights.omega, 20)
            np.testing.assert_allclose(scores, expected, rtol=0, atol=1e-12)

    def test_single_neighbor(self) -> None:
        windows = np.random.default_rng(2).normal(size=(15, 6))
        cache = build_cache([windows], 3, 4)
        nearest = int(cache.indices[0, 5, 0])
        pool = [j for j in range(15) if j != nearest]
        score = neighborhood_score(5, pool, 1, cache, 0)
        self.assertEqual(score, cache.distances[0, 5, 1])

    def test_identical_windows_score_zero(self) -> None:
        windows = np.tile(np.array([0.0, 1.0, 3.0, 2.0]), (5, 1))
        cache = build_cache([windows], 2, 3)
        scores = neighborhood_scores(cache, 0, np.ones(5, dtype=bool), 3)
        np.testing.assert_allclose(scores, 0.0, atol=1e-12)

    def test_pool_outside_cache_falls_back(self) -> None:
        windows = np.random.default_rng(4).normal(size=(10, 4))
        cache = build_cache([windows], 2, 2)
        pool = np.zeros(10, dtype=bool)
        pool[0] = True
        scores = neighborhood_scores(cache, 0, pool, 2)
        for i in range(10):
            if 0 not in cache.indices[0, i]:
                self.assertAlmostEqual(scores[i], float(cache.distances[0, i].mean()), places=12)

    def test_invalid_arguments(self) -> None:
        cache = build_cache([np.random.default_rng(4).normal(size=(10, 4))], 2, 2)
        self.assertRaises(ValueError, neighborhood_scores, cache, 0, np.ones(10, dtype=bool), 3)
        self.assertRaises(ValueError, neighborhood_scores, cache, 0, np.zeros(10, dtype=bool), 2)
        self.assertRaises(WindowError, neighborhood_scores, cache, 0, np.ones(9, dtype=bool), 2)


class TestThreadCount(unittest.TestCase):
    def test_default(self) -> None:
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(thread_count(), 1)

    def test_from_environment(self) -> None:
        with mock.patch.dict(os.environ, {THREADS_VARIABLE: "4"}):
            self.assertEqual(thread_count(), 4)

    def test_invalid(self) -> None:
        for value in ("0", "many"):
            with mock.patch.dict(os.environ, {THREADS_VARIABLE: value}):
                self.assertRaises(ValueError, thread_count)


if __name__ == "__main__":
    unittest.main()
