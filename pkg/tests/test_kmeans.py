import numpy as np
import pytest

from anneal.kmeans import kmeans, plus_plus_init


class TestKMeans:
    def test_inertia_trace_non_increasing(self):
        rng = np.random.default_rng(0)
        points = rng.standard_normal((200, 8))
        for seed in range(20):
            result = kmeans(points, 10, np.random.default_rng(seed))
            trace = result.inertia_trace
            for a, b in zip(trace, trace[1:]):
                assert b <= a + 1e-9 * max(1.0, abs(a))

    def test_separated_clusters_recovered(self):
        rng = np.random.default_rng(1)
        centers = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
        points = np.concatenate([
            c + 0.1 * rng.standard_normal((30, 2)) for c in centers])
        result = kmeans(points, 3, np.random.default_rng(2))
        groups = {frozenset(int(i) for i in
                            np.flatnonzero(result.assignments == c))
                  for c in range(3)}
        expected = {frozenset(range(0, 30)), frozenset(range(30, 60)),
                    frozenset(range(60, 90))}
        assert groups == expected

    def test_deterministic_given_rng_seed(self):
        rng = np.random.default_rng(3)
        points = rng.standard_normal((100, 4))
        r1 = kmeans(points, 7, np.random.default_rng(42))
        r2 = kmeans(points, 7, np.random.default_rng(42))
        np.testing.assert_array_equal(r1.assignments, r2.assignments)
        np.testing.assert_array_equal(r1.centers, r2.centers)

    def test_k_equal_n_gives_singletons(self):
        rng = np.random.default_rng(4)
        points = rng.standard_normal((12, 3))
        result = kmeans(points, 12, np.random.default_rng(5))
        # all points distinct, so every point should sit on its own center
        assert result.inertia_trace[-1] <= 1e-12

    def test_invalid_k_rejected(self):
        points = np.zeros((5, 2))
        with pytest.raises(ValueError):
            kmeans(points, 0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            kmeans(points, 6, np.random.default_rng(0))

    def test_duplicate_points_do_not_crash(self):
        points = np.zeros((10, 2))
        result = kmeans(points, 3, np.random.default_rng(6))
        assert result.inertia_trace[-1] == 0.0


class TestPlusPlusInit:
    def test_centers_are_dataset_points(self):
        rng = np.random.default_rng(7)
        points = rng.standard_normal((50, 3))
        centers = plus_plus_init(points, 5, np.random.default_rng(8))
        for c in centers:
            assert any(np.array_equal(c, p) for p in points)

    def test_spread_preference(self):
        # two tight far-apart blobs: k=2 should pick one center in each
        rng = np.random.default_rng(9)
        points = np.concatenate([
            0.01 * rng.standard_normal((40, 2)),
            [[1000.0, 1000.0]] + 0.01 * rng.standard_normal((40, 2)),
        ])
        hits = 0
        for seed in range(20):
            centers = plus_plus_init(points, 2, np.random.default_rng(seed))
            sides = {int(c[0] > 500) for c in centers}
            hits += sides == {0, 1}
        assert hits == 20
