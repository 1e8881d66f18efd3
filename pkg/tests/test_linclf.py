import warnings

import numpy as np
import pytest

from krfws.exceptions import NumericError
from krfws.forest_tools import kmeans_targets, split_weights
from krfws.linclf_tools import (LinearModel, WeightedSample, fit_weighted_svm, predict_class,
                                train_weighted_svm)


def partition_sse(y, labels):
    labels = np.asarray(labels)
    return sum(float(np.sum((y[labels == c] - y[labels == c].mean())**2)) for c in np.unique(labels))


class TestTrainWeightedSvm:

    def test_symmetric_pair(self):
        samples = [WeightedSample(x=np.array([-1.0]), label=1), WeightedSample(x=np.array([1.0]), label=2)]
        model = train_weighted_svm(samples, cost=10.0, tol=1e-6)
        assert predict_class(model, [-1.0]) == 1
        assert predict_class(model, [1.0]) == 2
        # boundary at x = 0
        assert abs(model.bias / model.weights[0]) < 0.1

    def test_separable_set(self, rng):
        X = np.vstack([rng.normal(-3, 0.5, (30, 2)), rng.normal(3, 0.5, (30, 2))])
        labels = np.repeat([1, 2], 30)
        model = fit_weighted_svm(X, labels, np.ones(60), cost=100.0, tol=1e-4, max_iter=10000)
        pred = np.array([predict_class(model, x) for x in X])
        np.testing.assert_array_equal(pred, labels)

    def test_single_class(self):
        with pytest.raises(NumericError):
            fit_weighted_svm(np.zeros((3, 2)), [1, 1, 1], np.ones(3))

    def test_zero_class_weight(self):
        X = np.array([[0.0], [1.0], [2.0]])
        with pytest.raises(NumericError):
            fit_weighted_svm(X, [1, 2, 2], [0.0, 1.0, 1.0])

    def test_weight_out_of_range(self):
        with pytest.raises(ValueError):
            WeightedSample(x=np.zeros(2), label=1, weight=1.5)

    def test_zero_weight_sample_has_no_influence(self, rng):
        X = rng.normal(size=(40, 3))
        labels = np.where(X[:, 0] > 0, 2, 1)
        weights = rng.uniform(0.1, 1.0, 40)
        base = fit_weighted_svm(X, labels, weights, seed=3)

        outlier = np.vstack([X, [[50.0, -20.0, 3.0]]])
        more = fit_weighted_svm(outlier, np.append(labels, 1), np.append(weights, 0.0), seed=3)
        np.testing.assert_array_equal(base.weights, more.weights)
        assert base.bias == more.bias

    def test_multiclass_one_versus_rest(self, rng):
        centers = np.array([[0.0, 5.0], [5.0, -5.0], [-5.0, -5.0]])
        X = np.vstack([rng.normal(c, 0.3, (20, 2)) for c in centers])
        labels = np.repeat([1, 2, 3], 20)
        models = fit_weighted_svm(X, labels, np.ones(60), cost=10.0)
        assert len(models) == 3
        assert [predict_class(models, c) for c in centers] == [1, 2, 3]

    def test_scaling_weights_and_cost(self, rng):
        X = rng.normal(size=(40, 3))
        labels = np.where(X[:, 0] + rng.normal(0, 0.5, 40) > 0, 2, 1)
        weights = rng.uniform(0.1, 1.0, 40)
        base = fit_weighted_svm(X, labels, weights, cost=1.0, seed=2)
        for alpha in (0.5, 0.25):
            scaled = fit_weighted_svm(X, labels, alpha*weights, cost=1.0/alpha, seed=2)
            np.testing.assert_allclose(scaled.weights, base.weights, rtol=0, atol=1e-10)
            assert scaled.bias == pytest.approx(base.bias, abs=1e-10)

    def test_warning_filters_are_left_alone(self, rng):
        X = rng.normal(size=(30, 2))
        labels = np.where(X[:, 0] > 0, 2, 1)
        before = list(warnings.filters)
        fit_weighted_svm(X, labels, np.ones(30), tol=1e-12, max_iter=1)
        assert warnings.filters == before


class TestSplitQuality:

    def test_weights_favour_costly_samples(self):
        # 16 samples far from the target boundary, 4 close to it whose
        # feature sits on the wrong side
        s = np.repeat([-1.0, 1.0], 10)
        near = np.isin(np.arange(20), [0, 1, 10, 11])
        wins = 0
        for d in range(100):
            rng = np.random.default_rng(d)
            y = s * np.where(near, rng.uniform(0.05, 0.3, 20), rng.uniform(3.0, 5.0, 20))
            x = (np.where(near, -2.0*s, s) + rng.normal(0, 0.3, 20))[:, None]
            clusters = kmeans_targets(y, seed=d)
            uniform = fit_weighted_svm(x, clusters.labels, np.ones(20), cost=10.0, tol=1e-3, max_iter=10000)
            weighted = fit_weighted_svm(x, clusters.labels, split_weights(y, clusters).w, cost=10.0,
                                        tol=1e-3, max_iter=10000)
            sse = [partition_sse(y, [predict_class(m, xi) for xi in x]) for m in (weighted, uniform)]
            wins += sse[0] <= sse[1] + 1e-9
        assert wins >= 90


class TestPredictClass:

    def test_sign_rule(self):
        model = LinearModel(weights=np.array([1.0]), bias=0.0)
        assert predict_class(model, [2.0]) == 2
        assert predict_class(model, [-2.0]) == 1

    def test_hyperplane_goes_to_class_one(self):
        model = LinearModel(weights=np.array([1.0, -1.0]), bias=0.0)
        assert predict_class(model, [3.0, 3.0]) == 1

    def test_ovr_tie(self):
        models = [LinearModel(weights=np.array([0.0]), bias=0.3),
                  LinearModel(weights=np.array([0.0]), bias=0.3)]
        assert predict_class(models, [1.0]) == 1

    def test_dimension_mismatch(self):
        model = LinearModel(weights=np.array([1.0, 2.0]), bias=0.0)
        with pytest.raises(ValueError):
            predict_class(model, [1.0])
