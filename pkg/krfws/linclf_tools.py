'''
Weighted L2-regularized linear SVM used as the split classifier of
forest nodes.

The solver is LIBLINEAR's dual coordinate descent for the L1-loss (hinge)
SVM, as bundled with scikit-learn. Sample i enters the dual problem with
the box constraint 0 <= alpha_i <= C*w_i, and a constant bias feature of
value 1 is appended to every sample.
'''

import warnings
from dataclasses import dataclass
from logging import getLogger, NullHandler

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.svm import LinearSVC

from krfws.exceptions import NumericError

logger = getLogger(__name__)
logger.addHandler(NullHandler())


@dataclass(frozen=True, eq=False)
class LinearModel:

    '''
    :weights:
        Weight vector over the input dimensions.
    :bias:
        Scalar offset.
    '''

    weights: np.ndarray
    bias: float

    def score(self, x):
        return float(np.dot(self.weights, x) + self.bias)


@dataclass(frozen=True, eq=False)
class WeightedSample:

    '''
    :x:
        Feature vector.
    :label:
        Class id in 1..K.
    :weight:
        Importance of the sample, in [0, 1].
    '''

    x: np.ndarray
    label: int
    weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"sample weight must lie in [0, 1], got {self.weight}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("sample features must be finite")


def train_weighted_svm(samples, cost=1.0, tol=0.1, max_iter=1000, seed=0):

    '''
    Trains a weighted linear SVM from a list of WeightedSample objects.

    See fit_weighted_svm for the meaning of the remaining arguments.
    '''

    X = np.vstack([np.asarray(s.x, dtype=np.float64) for s in samples])
    labels = np.array([s.label for s in samples])
    weights = np.array([s.weight for s in samples], dtype=np.float64)
    return fit_weighted_svm(X, labels, weights, cost=cost, tol=tol, max_iter=max_iter, seed=seed)


def fit_weighted_svm(X, labels, weights, cost=1.0, tol=0.1, max_iter=1000, seed=0):

    '''
    Trains a weighted linear SVM.

    :X:
        Array of shape (num_samples, num_features).
    :labels:
        Class ids 1..K, one per sample.
    :weights:
        Sample weights in [0, 1]. Samples with weight 0 are removed before
        solving, so they have no influence on the result.
    :cost:
        The SVM cost parameter C.
    :tol:
        Stopping tolerance of the dual coordinate descent.
    :max_iter:
        Maximal number of passes over the data.
    :seed:
        Seed of the random order in which dual coordinates are visited.

    Returns:
        A LinearModel for K = 2 (positive scores mean class 2), a list of K
        one-versus-rest LinearModels for K > 2.
    '''

    if cost <= 0:
        raise ValueError(f"SVM cost must be positive, got {cost}")
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)

    classes = np.unique(labels)
    if len(classes) < 2:
        raise NumericError("a split classifier needs samples of at least two classes")
    if not np.array_equal(classes, np.arange(1, len(classes) + 1)):
        raise ValueError(f"class ids must be 1..K, got {classes.tolist()}")
    for c in classes:
        if weights[labels == c].sum() <= 0:
            raise NumericError(f"class {c} has zero total weight")

    keep = weights > 0
    X, labels, weights = X[keep], labels[keep], weights[keep]

    svm = LinearSVC(C=cost, loss="hinge", dual=True, tol=tol, max_iter=max_iter,
                    fit_intercept=True, intercept_scaling=1.0,
                    random_state=int(seed) % (2**31 - 1))
    with warnings.catch_warnings():
        # forest splits use a loose tolerance, hitting max_iter is logged below
        warnings.simplefilter("ignore", ConvergenceWarning)
        svm.fit(X, labels, sample_weight=weights)
    if np.max(svm.n_iter_) >= max_iter:
        logger.debug("SVM stopped at max_iter=%d on %d samples", max_iter, len(labels))

    if len(classes) == 2:
        return LinearModel(weights=svm.coef_[0].copy(), bias=float(svm.intercept_[0]))
    return [LinearModel(weights=w.copy(), bias=float(b)) for w, b in zip(svm.coef_, svm.intercept_)]


def predict_class(models, x):

    '''
    Class id assigned to a feature vector.

    :models:
        A LinearModel (binary) or a list of one-versus-rest LinearModels.
    :x:
        Feature vector.

    Returns:
        For a binary model 2 if w.x + b > 0 and 1 otherwise. For one-versus-rest
        models the class with the largest score; ties go to the lowest class id.
    '''

    x = np.asarray(x, dtype=np.float64)
    single = isinstance(models, LinearModel)
    first = models if single else models[0]
    if x.shape != first.weights.shape:
        raise ValueError(f"feature dimension {x.shape} does not match model dimension {first.weights.shape}")
    if single:
        return 2 if models.score(x) > 0 else 1
    scores = [m.score(x) for m in models]
    return int(np.argmax(scores)) + 1
