import itertools

import numpy as np
import pytest

from krfws.exceptions import DataError, NumericError
from krfws.forest_tools import (ClusterPair, ForestParams, KForest, KTree, kmeans_targets, leaf_code,
                                leaf_codes, load_forest, predict, save_forest, split_weights,
                                train_forest, train_tree)


def constant_tree(value, n_features=2):
    value = np.atleast_1d(np.asarray(value, dtype=float))
    return KTree(children=np.full((1, 2), -1), split=np.array([-1]), leaf=np.array([0]),
                 coef=np.zeros((0, 1, n_features)), intercept=np.zeros((0, 1)),
                 values=value[None, :], n_features=n_features)


def two_clusters(rng, n=60, noise=0.05):
    # the first feature decides the target cluster
    X = rng.normal(size=(n, 3))
    X[:, 0] += np.where(X[:, 0] > 0, 1.0, -1.0)
    Y = np.where(X[:, :1] > 0, 10.0, 0.0) + rng.normal(0, noise, (n, 1))
    return X, Y


def best_partition_sse(Y):
    n = len(Y)
    best = np.inf
    for mask in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + mask)
        if labels.min() == labels.max():
            continue
        sse = sum(np.sum((Y[labels == c] - Y[labels == c].mean(axis=0))**2) for c in (0, 1))
        best = min(best, sse)
    return best


def boundary_mixture(rng, n):
    # two distant target groups and a band of targets near their boundary;
    # the first feature tells the groups apart but points the wrong way
    # inside the band, the second is weakly informative everywhere
    s = rng.choice([-1.0, 1.0], n)
    near = rng.random(n) < 0.3
    size = np.where(near, np.abs(rng.normal(0.0, 0.2, n)), rng.normal(4.0, 0.5, n))
    Y = (s*size)[:, None] * [1.0, 0.5] + rng.normal(0, 0.1, (n, 2))
    X = rng.normal(0, 0.5, (n, 5))
    X[:, 0] += np.where(near, -2.0*s, s)
    X[:, 1] += 0.6*s
    return X, Y


def compare_weighting(draws):
    krfws_mse, krf_mse = [], []
    for d in range(draws):
        X, Y = boundary_mixture(np.random.default_rng(100 + d), 300)
        errors = []
        for weighted in (True, False):
            params = ForestParams(n_trees=5, max_depth=3, weighted=weighted)
            forest = train_forest(X[:200], Y[:200], params, seed=d)
            errors.append(float(np.mean((forest.predict(X[200:]) - Y[200:])**2)))
        krfws_mse.append(errors[0])
        krf_mse.append(errors[1])
    return np.array(krfws_mse), np.array(krf_mse)


class TestKmeansTargets:

    def test_one_dimensional(self):
        c = kmeans_targets([0.0, 1.0, 10.0, 11.0], K=2, seed=0)
        np.testing.assert_allclose(sorted(c.centroids[:, 0]), [0.5, 10.5])
        assert c.sse == pytest.approx(1.0)
        assert c.labels[0] == c.labels[1] != c.labels[2] == c.labels[3]

    def test_zero_variance_groups(self):
        Y = np.array([[0.0, 0.0]]*3 + [[5.0, 5.0]]*4)
        c = kmeans_targets(Y, K=2, seed=1)
        assert c.sse == 0.0

    def test_two_samples(self):
        Y = np.array([[1.0, 2.0], [3.0, 4.0]])
        c = kmeans_targets(Y, K=2)
        np.testing.assert_allclose(sorted(map(tuple, c.centroids)), [(1.0, 2.0), (3.0, 4.0)])

    def test_too_few_distinct_targets(self):
        with pytest.raises(NumericError):
            kmeans_targets([[1.0], [1.0], [1.0]], K=2)

    def test_centroids_are_member_means(self, rng):
        Y = rng.normal(size=(30, 3))
        c = kmeans_targets(Y, K=2, seed=4)
        for j in (1, 2):
            np.testing.assert_allclose(c.centroids[j - 1], Y[c.labels == j].mean(axis=0))

    def test_matches_exhaustive_partition(self, rng):
        hits = 0
        for _ in range(500):
            Y = rng.normal(size=(int(rng.integers(2, 13)), int(rng.integers(1, 4))))
            c = kmeans_targets(Y, K=2, seed=int(rng.integers(1000)))
            best = best_partition_sse(Y)
            assert c.sse <= 1.1 * best + 1e-9
            hits += c.sse <= best + 1e-9
        assert hits >= 475

    def test_better_than_random_partitions(self, rng):
        Y = rng.normal(size=(25, 2))
        c = kmeans_targets(Y, K=2)
        for _ in range(1000):
            labels = rng.integers(0, 2, len(Y))
            if labels.min() == labels.max():
                continue
            sse = sum(np.sum((Y[labels == k] - Y[labels == k].mean(axis=0))**2) for k in (0, 1))
            assert c.sse <= sse + 1e-9


class TestSplitWeights:

    def pair(self, c1, c2):
        return ClusterPair(centroids=np.array([c1, c2], dtype=float), labels=np.array([1, 2]), sse=0.0)

    def test_hand_evaluated(self):
        sw = split_weights([[1.5, 3.0]], self.pair([0, 0], [2, 0]))
        np.testing.assert_allclose(sw.v, [0.5])
        np.testing.assert_allclose(sw.w, [1.0])

    def test_midpoint_has_zero_weight(self):
        sw = split_weights([[1.0, 0.0], [2.0, 0.0]], self.pair([0, 0], [2, 0]))
        np.testing.assert_allclose(sw.v, [0.0, 1.0])
        np.testing.assert_allclose(sw.w, [0.0, 1.0])

    def test_mirror_symmetry(self):
        sw = split_weights([[0.2, 1.0], [1.8, -4.0]], self.pair([0, 0], [2, 0]))
        assert sw.w[0] == pytest.approx(sw.w[1])
        assert sw.v[0] == pytest.approx(-sw.v[1])

    def test_coincident_centroids(self):
        with pytest.raises(NumericError):
            split_weights([[1.0], [2.0]], self.pair([1.0], [1.0]))

    def test_brute_force_oracle(self, rng):
        for _ in range(1000):
            d = int(rng.integers(1, 9))
            Y = rng.normal(size=(int(rng.integers(2, 20)), d))
            c1, c2 = rng.normal(size=d), rng.normal(size=d)
            sw = split_weights(Y, self.pair(c1, c2))
            unit = (c2 - c1) / np.sqrt(np.sum((c2 - c1)**2))
            v = np.array([np.dot(y - (c1 + c2)/2, unit) for y in Y])
            np.testing.assert_allclose(sw.v, v, rtol=0, atol=1e-12)
            assert sw.w.max() == 1.0
            assert sw.w.min() >= 0.0


class TestTrainTree:

    def test_identical_targets_give_single_leaf(self, rng):
        tree = train_tree(rng.normal(size=(20, 3)), np.full((20, 2), 1.5))
        assert tree.n_leaves == 1
        np.testing.assert_array_equal(predict(tree, rng.normal(size=3)), [1.5, 1.5])

    def test_min_samples(self, rng):
        tree = train_tree(rng.normal(size=(4, 2)), rng.normal(size=4), min_samples=5)
        assert tree.n_leaves == 1

    def test_depth_one_recovers_clusters(self, rng):
        X, Y = two_clusters(rng)
        tree = train_tree(X, Y, max_depth=1, seed=0, cost=10.0, tol=1e-4, max_iter=10000)
        assert tree.n_leaves == 2
        clusters = kmeans_targets(Y, seed=0)
        np.testing.assert_allclose(sorted(tree.values[:, 0]), sorted(clusters.centroids[:, 0]), atol=1e-9)
        sse = np.sum((tree.predict(X) - Y)**2)
        assert sse == pytest.approx(clusters.sse)

    def test_leaf_values_are_means(self, rng):
        X, Y = two_clusters(rng, n=80, noise=1.0)
        tree = train_tree(X, Y, max_depth=3, seed=2)
        leaves = tree.apply(X)
        for j in range(tree.n_leaves):
            np.testing.assert_allclose(tree.values[j], Y[leaves == j].mean(axis=0))

    def test_every_internal_node_has_k_children(self, rng):
        X, Y = two_clusters(rng, n=100, noise=1.0)
        tree = train_tree(X, Y, max_depth=4, seed=5)
        internal = tree.split >= 0
        assert np.all(tree.children[internal] >= 0)
        assert np.all(tree.children[~internal] == -1)
        np.testing.assert_array_equal(np.sort(tree.leaf[~internal]), np.arange(tree.n_leaves))
        assert tree.n_leaves <= 2**4

    def test_three_way_splits(self, rng):
        X = rng.normal(size=(90, 2))
        Y = np.digitize(X[:, 0], [-0.5, 0.5]).astype(float)[:, None] * 5
        tree = train_tree(X, Y, K=3, max_depth=1, cost=10.0)
        assert tree.children.shape[1] == 3
        assert tree.n_leaves in (1, 3)

    def test_empty_input(self):
        with pytest.raises(ValueError):
            train_tree(np.zeros((0, 2)), np.zeros(0))

    def test_separable_targets_are_reproduced(self):
        X = np.array([[-2.0], [-1.0], [-1.5], [1.0], [2.0], [1.5]])
        Y = np.array([0.0, 0.0, 0.0, 10.0, 10.0, 10.0])
        a = train_tree(X, Y, max_depth=1, seed=3, min_samples=2, tol=1e-4, max_iter=10000)
        np.testing.assert_array_equal(a.predict(X)[:, 0], Y)


class TestForest:

    def test_averages_trees(self):
        forest = KForest(trees=(constant_tree([0.0, 0.0]), constant_tree([2.0, 2.0])))
        np.testing.assert_array_equal(predict(forest, np.zeros(2)), [1.0, 1.0])

    def test_tree_order_does_not_matter(self, rng, small_forest):
        X, Y = two_clusters(rng, noise=1.0)
        forest = train_forest(X, Y, small_forest, seed=1)
        reverse = KForest(trees=forest.trees[::-1])
        np.testing.assert_array_equal(forest.predict(X), reverse.predict(X))

    def test_deterministic_and_independent_of_threads(self, rng, small_forest):
        X, Y = two_clusters(rng, noise=1.0)
        a = train_forest(X, Y, small_forest, seed=9, n_jobs=1)
        b = train_forest(X, Y, small_forest, seed=9, n_jobs=3)
        np.testing.assert_array_equal(a.predict(X), b.predict(X))

    def test_dimension_mismatch(self, rng, small_forest):
        X, Y = two_clusters(rng)
        forest = train_forest(X, Y, small_forest)
        with pytest.raises(ValueError):
            predict(forest, np.zeros(5))

    def test_weighted_splits_reduce_test_error(self):
        krfws_mse, krf_mse = compare_weighting(draws=8)
        assert np.mean(krfws_mse) <= np.mean(krf_mse)

    def test_one_weighted_split_has_lower_sse(self):
        wins = []
        for d in range(50):
            X, Y = boundary_mixture(np.random.default_rng(500 + d), 150)
            sse = []
            for weighted in (True, False):
                tree = train_tree(X, Y, max_depth=1, weighted=weighted, seed=d)
                sse.append(float(np.sum((tree.predict(X) - Y)**2)))
            wins.append(sse[0] <= sse[1])
        assert np.mean(wins) >= 0.6

    @pytest.mark.slow
    def test_weighted_beats_unweighted(self):
        krfws_mse, krf_mse = compare_weighting(draws=50)
        assert np.mean(krfws_mse) <= np.mean(krf_mse)
        assert np.mean(krfws_mse <= krf_mse) >= 0.6


class TestLeafCodes:

    def test_one_hot_per_tree(self, rng):
        X, Y = two_clusters(rng, noise=1.0)
        forest = train_forest(X, Y, ForestParams(n_trees=5, max_depth=3), seed=0)
        codes = leaf_codes(forest, X)
        assert codes.shape == (len(X), forest.code_length)
        np.testing.assert_array_equal(np.asarray(codes.sum(axis=1)).ravel(), 5)

    def test_single_leaf_trees(self):
        forest = KForest(trees=(constant_tree([1.0]), constant_tree([2.0])))
        a = leaf_code(forest, np.array([3.0, -1.0])).toarray()
        b = leaf_code(forest, np.array([-7.0, 0.5])).toarray()
        np.testing.assert_array_equal(a, [[1.0, 1.0]])
        np.testing.assert_array_equal(a, b)

    def test_deterministic(self, rng, small_forest):
        X, Y = two_clusters(rng)
        forest = train_forest(X, Y, small_forest)
        a = leaf_code(forest, X[0]).toarray()
        b = leaf_code(forest, X[0]).toarray()
        np.testing.assert_array_equal(a, b)


class TestForestStorage:

    def test_save_and_load_bit_exact(self, rng, small_forest, tmp_path):
        X, Y = two_clusters(rng, noise=1.0)
        forest = train_forest(X, Y, small_forest, seed=4)
        fname = str(tmp_path / "forest.krfws")
        save_forest(forest, fname)
        loaded = load_forest(fname)
        assert len(loaded.trees) == len(forest.trees)
        for a, b in zip(forest.trees, loaded.trees):
            for name in ("children", "split", "leaf", "coef", "intercept", "values"):
                np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        np.testing.assert_array_equal(loaded.predict(X), forest.predict(X))
        with open(fname, "rb") as foo:
            first = foo.read()
        save_forest(loaded, fname)
        with open(fname, "rb") as foo:
            assert foo.read() == first

    def test_not_a_container(self, tmp_path):
        fname = tmp_path / "junk.krfws"
        fname.write_bytes(b"hello world")
        with pytest.raises(DataError):
            load_forest(str(fname))
