'''
K-cluster Regression Forests with Weighted Splitting (KRFWS).

Every internal node of a tree clusters the targets of its training samples
with k-means and trains a linear SVM on the input features to reproduce
that partition. With weighted splitting (K = 2) each sample enters the SVM
with a weight equal to its normalized distance from the hyperplane
bisecting the two cluster centroids, so that samples whose misrouting
would increase the loss most are fitted first. weighted=False gives the
plain K-cluster Regression Forest.
'''

import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from logging import getLogger, NullHandler

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed
from sklearn.cluster import KMeans

from krfws.exceptions import DataError, NumericError
from krfws.helpers import worker_count
from krfws.linclf_tools import LinearModel, fit_weighted_svm
from krfws.store_tools import read_container, write_container

logger = getLogger(__name__)
logger.addHandler(NullHandler())

# version of the forest layout stored in model containers
FOREST_FORMAT = 1

_MAX_SEED = 2**31 - 1

# largest node split by enumerating all 2-partitions of its targets
EXHAUSTIVE_MAX = 12


@dataclass(frozen=True, eq=False)
class ClusterPair:

    '''
    Result of k-means clustering of node targets.

    :centroids:
        Array of shape (K, target_dim); row j is the mean of cluster j+1.
    :labels:
        Cluster id (1..K) of every sample.
    :sse:
        Within-cluster sum of squared errors.
    '''

    centroids: np.ndarray
    labels: np.ndarray
    sse: float

    @property
    def c1(self):
        return self.centroids[0]

    @property
    def c2(self):
        return self.centroids[1]


@dataclass(frozen=True, eq=False)
class SplitWeights:

    '''
    :v:
        Signed distance of every target from the hyperplane bisecting
        the two centroids (positive on the side of c2).
    :w:
        |v| divided by its maximum over the node.
    '''

    v: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class ForestParams:

    '''
    Hyperparameters of forest training.
    '''

    n_trees: int = 10
    K: int = 2
    max_depth: int = 7
    min_samples: int = 5
    weighted: bool = True
    bagging_fraction: float = 0.63
    cost: float = 1.0
    tol: float = 0.1
    max_iter: int = 1000
    restarts: int = 5


def _as_targets(targets):
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if not np.all(np.isfinite(Y)):
        raise ValueError("targets must be finite")
    return Y


@lru_cache(maxsize=None)
def _two_partitions(n):
    # every split of n samples into two nonempty groups, sample 0 in group 0
    codes = np.arange(1, 2**(n - 1))
    members = (codes[:, None] >> np.arange(n - 1)) & 1
    M = np.hstack([np.zeros((len(codes), 1), dtype=np.int64), members])
    M.setflags(write=False)
    return M


def _best_two_partition(Y):

    '''
    0/1 labels of the 2-partition of Y with the smallest within-cluster SSE.
    '''

    Y = Y - Y.mean(axis=0)
    M = _two_partitions(len(Y))
    n2 = M.sum(axis=1)
    n1 = len(Y) - n2
    s2 = M @ Y
    s1 = -s2
    # SSE = sum |y|^2 - |s1|^2/n1 - |s2|^2/n2 for centered targets
    gain = np.sum(s1**2, axis=1) / n1 + np.sum(s2**2, axis=1) / n2
    return M[int(np.argmax(gain))].copy()


def kmeans_targets(targets, K=2, seed=0, restarts=5):

    '''
    Clusters target points with Lloyd's algorithm.

    :targets:
        Array of shape (num_samples, target_dim) (or a 1D array of scalars).
    :K:
        Number of clusters.
    :seed:
        Seed of the k-means++ initialization.
    :restarts:
        Number of k-means++ restarts; the partition with the smallest
        within-cluster SSE is kept.

    Returns:
        A ClusterPair. Lloyd iterations run until the assignment no longer
        changes, and the centroids are the exact means of their members.
        Two-way splits of nodes with at most EXHAUSTIVE_MAX samples are
        found by trying every partition; the optimal partition is itself
        a fixed point of Lloyd's algorithm.
    '''

    Y = _as_targets(targets)
    if len(np.unique(Y, axis=0)) < K:
        raise NumericError(f"k-means needs at least {K} distinct targets")

    if K == 2 and len(Y) <= EXHAUSTIVE_MAX:
        labels = _best_two_partition(Y)
    else:
        km = KMeans(n_clusters=K, init="k-means++", n_init=restarts, tol=0.0,
                    max_iter=300, algorithm="lloyd", random_state=int(seed) % _MAX_SEED)
        labels = km.fit(Y).labels_
    centroids = np.zeros((K, Y.shape[1]))
    for j in range(K):
        members = Y[labels == j]
        if len(members) == 0:
            raise NumericError("k-means produced an empty cluster")
        centroids[j] = members.mean(axis=0)
    sse = float(np.sum((Y - centroids[labels])**2))
    return ClusterPair(centroids=centroids, labels=labels + 1, sse=sse)


def split_weights(targets, clusters):

    '''
    Weights of node samples for training the split classifier.

    :targets:
        Targets of the node samples.
    :clusters:
        A ClusterPair with two centroids.

    Returns:
        SplitWeights with v_i = (y_i - (c1 + c2)/2) . (c2 - c1)/|c2 - c1|
        and w_i = |v_i| / max_j |v_j|.
    '''

    Y = _as_targets(targets)
    if len(Y) == 0:
        raise ValueError("split weights of an empty node")
    c1, c2 = clusters.c1, clusters.c2
    diff = c2 - c1
    dist = np.linalg.norm(diff)
    if dist == 0:
        raise NumericError("cluster centroids coincide")

    v = (Y - (c1 + c2) / 2) @ (diff / dist)
    top = np.max(np.abs(v))
    if top == 0:
        raise NumericError("all node targets lie on the bisecting hyperplane")
    return SplitWeights(v=v, w=np.abs(v) / top)


def _route(X, coef, intercept):

    '''
    Child index (0-based) chosen by split classifiers.

    :X:
        Array of shape (num_samples, num_features).
    :coef:
        (num_models, num_features) for one classifier shared by all samples,
        or (num_samples, num_models, num_features) for one per sample.
    :intercept:
        Matching biases.
    '''

    if coef.ndim == 2:
        scores = X @ coef.T + intercept
    else:
        scores = np.einsum("imd,id->im", coef, X) + intercept
    if scores.shape[1] == 1:
        # positive side is class 2; points on the hyperplane go to class 1
        return (scores[:, 0] > 0).astype(np.int64)
    return np.argmax(scores, axis=1)


@dataclass(frozen=True, eq=False)
class KTree:

    '''
    A trained K-ary regression tree stored as flat arrays.

    :children:
        (num_nodes, K) ids of child nodes, -1 in leaf rows.
    :split:
        (num_nodes,) row of coef/intercept used by an internal node, -1 for leaves.
    :leaf:
        (num_nodes,) dense leaf index 0..L-1 of leaves, -1 for internal nodes.
    :coef:
        (num_splits, num_models, num_features) split classifier weights;
        num_models is 1 for K = 2 and K for one-versus-rest splits.
    :intercept:
        (num_splits, num_models) split classifier biases.
    :values:
        (L, target_dim) mean training target of every leaf.
    '''

    children: np.ndarray
    split: np.ndarray
    leaf: np.ndarray
    coef: np.ndarray
    intercept: np.ndarray
    values: np.ndarray
    n_features: int
    K: int = 2
    max_depth: int = 7
    min_samples: int = 5

    @property
    def n_leaves(self):
        return len(self.values)

    @property
    def n_outputs(self):
        return self.values.shape[1]

    def split_model(self, node):

        '''
        Split classifier(s) of an internal node as LinearModel objects.
        '''

        s = self.split[node]
        if s < 0:
            raise ValueError(f"node {node} is a leaf")
        models = [LinearModel(weights=w, bias=float(b)) for w, b in zip(self.coef[s], self.intercept[s])]
        return models[0] if len(models) == 1 else models

    def apply(self, X):

        '''
        Leaf index reached by every row of X.
        '''

        X = _as_features(X, self.n_features)
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            s = self.split[node]
            active = np.flatnonzero(s >= 0)
            if len(active) == 0:
                break
            child = _route(X[active], self.coef[s[active]], self.intercept[s[active]])
            node[active] = self.children[node[active], child]
        return self.leaf[node]

    def predict(self, X):
        return self.values[self.apply(X)]


def _as_features(X, n_features):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ValueError(f"feature dimension {X.shape[-1]} does not match model dimension {n_features}")
    return X


def _find_split(X, Y, K, weighted, rng, cost, tol, max_iter, restarts):

    '''
    Split classifier of a node and the child index of every node sample,
    or None if the node cannot be split.
    '''

    kmeans_seed = int(rng.integers(_MAX_SEED))
    svm_seed = int(rng.integers(_MAX_SEED))
    try:
        clusters = kmeans_targets(Y, K, seed=kmeans_seed, restarts=restarts)
        if weighted and K == 2:
            weights = split_weights(Y, clusters).w
        else:
            # the weighting scheme is defined for two clusters only
            weights = np.ones(len(Y))
        models = fit_weighted_svm(X, clusters.labels, weights, cost=cost, tol=tol,
                                  max_iter=max_iter, seed=svm_seed)
    except NumericError as ex:
        logger.debug("node of %d samples becomes a leaf: %s", len(Y), ex)
        return None

    if isinstance(models, LinearModel):
        models = [models]
    coef = np.vstack([m.weights for m in models])
    intercept = np.array([m.bias for m in models])
    child = _route(X, coef, intercept)

    # a split that leaves a child without samples is degenerate
    if len(np.unique(child)) < K:
        return None
    return coef, intercept, child


def train_tree(X, Y, K=2, max_depth=7, min_samples=5, weighted=True, seed=0,
               cost=1.0, tol=0.1, max_iter=1000, restarts=5):

    '''
    Trains a single K-cluster regression tree.

    :X:
        Input features, shape (num_samples, num_features).
    :Y:
        Targets, shape (num_samples, target_dim) or (num_samples,).
    :K:
        Number of children of every internal node.
    :max_depth:
        Maximal depth; the root has depth 0, so a tree has at most
        K**max_depth leaves.
    :min_samples:
        Nodes with fewer samples become leaves.
    :weighted:
        Use the weighted splitting (KRFWS) instead of uniform weights (KRF).
    :seed:
        Integer seed or numpy Generator.
    :cost:
    :tol:
    :max_iter:
        Parameters of the split SVM.
    :restarts:
        Number of k-means restarts.

    Returns:
        A KTree. A node becomes a leaf when it reaches max_depth, has fewer
        than min_samples samples, has identical targets, or its split
        is degenerate. Leaves store the mean of the targets routed to them.
    '''

    X = np.asarray(X, dtype=np.float64)
    Y = _as_targets(Y)
    if len(X) == 0:
        raise ValueError("cannot train a tree on an empty set")
    if len(X) != len(Y):
        raise ValueError(f"{len(X)} feature vectors but {len(Y)} targets")
    if K < 2:
        raise ValueError(f"K must be at least 2, got {K}")
    rng = np.random.default_rng(seed)

    children, split, leaf = [], [], []
    coefs, intercepts, values = [], [], []

    def new_node():
        children.append([-1]*K)
        split.append(-1)
        leaf.append(-1)
        return len(split) - 1

    stack = [(new_node(), np.arange(len(X)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        found = None
        if depth < max_depth and len(idx) >= min_samples and np.ptp(Y[idx], axis=0).max() > 0:
            found = _find_split(X[idx], Y[idx], K, weighted, rng, cost, tol, max_iter, restarts)

        if found is None:
            leaf[node] = len(values)
            values.append(Y[idx].mean(axis=0))
            continue

        coef, intercept, child = found
        split[node] = len(coefs)
        coefs.append(coef)
        intercepts.append(intercept)
        kids = [new_node() for _ in range(K)]
        children[node] = kids
        # reversed, so that leaves are numbered from the first child on
        for c in reversed(range(K)):
            stack.append((kids[c], idx[child == c], depth + 1))

    n_models = 1 if K == 2 else K
    return KTree(children=np.array(children, dtype=np.int64),
                 split=np.array(split, dtype=np.int64),
                 leaf=np.array(leaf, dtype=np.int64),
                 coef=np.array(coefs, dtype=np.float64).reshape(len(coefs), n_models, X.shape[1]),
                 intercept=np.array(intercepts, dtype=np.float64).reshape(len(coefs), n_models),
                 values=np.array(values, dtype=np.float64),
                 n_features=X.shape[1], K=K, max_depth=max_depth, min_samples=min_samples)


@dataclass(frozen=True, eq=False)
class KForest:

    '''
    :trees:
        Tuple of KTree objects sharing input and target dimensions.
    :bagging_fraction:
        Fraction of the training set drawn (without replacement) for each tree.
    :seed:
        Seed the per-tree random streams were derived from.
    '''

    trees: tuple
    bagging_fraction: float = 0.63
    seed: int = 0
    train_seconds: tuple = field(default=(), compare=False)

    @property
    def n_features(self):
        return self.trees[0].n_features

    @property
    def n_outputs(self):
        return self.trees[0].n_outputs

    @property
    def code_length(self):
        return sum(t.n_leaves for t in self.trees)

    def predict(self, X):
        out = np.stack([t.predict(X) for t in self.trees])
        # summing sorted values makes the result independent of tree order
        return np.sort(out, axis=0).mean(axis=0)


def _train_forest_tree(X, Y, params, seed_seq):
    rng = np.random.default_rng(seed_seq)
    n = len(X)
    m = min(n, max(1, math.ceil(params.bagging_fraction * n)))
    idx = np.sort(rng.choice(n, size=m, replace=False))
    start = time.perf_counter()
    tree = train_tree(X[idx], Y[idx], K=params.K, max_depth=params.max_depth,
                      min_samples=params.min_samples, weighted=params.weighted, seed=rng,
                      cost=params.cost, tol=params.tol, max_iter=params.max_iter,
                      restarts=params.restarts)
    return tree, time.perf_counter() - start


def train_forest(X, Y, params=None, seed=0, n_jobs=1):

    '''
    Trains a bagged forest of K-cluster regression trees.

    :X:
        Input features, shape (num_samples, num_features).
    :Y:
        Targets, shape (num_samples, target_dim) or (num_samples,).
    :params:
        ForestParams; defaults if None.
    :seed:
        Integer seed. Tree i uses the i-th stream spawned from it, so the
        result does not depend on n_jobs.
    :n_jobs:
        Number of threads used to train trees concurrently.

    Returns:
        A KForest.
    '''

    if params is None:
        params = ForestParams()
    X = np.asarray(X, dtype=np.float64)
    Y = _as_targets(Y)
    if len(X) == 0:
        raise ValueError("cannot train a forest on an empty set")
    if len(X) != len(Y):
        raise ValueError(f"{len(X)} feature vectors but {len(Y)} targets")

    streams = np.random.SeedSequence(int(seed)).spawn(params.n_trees)
    results = Parallel(n_jobs=worker_count(n_jobs), prefer="threads")(
        delayed(_train_forest_tree)(X, Y, params, s) for s in streams)
    trees = tuple(r[0] for r in results)
    seconds = tuple(r[1] for r in results)
    logger.debug("trained %d trees on %d samples, %.3f s per tree",
                 len(trees), len(X), float(np.mean(seconds)))
    return KForest(trees=trees, bagging_fraction=params.bagging_fraction, seed=int(seed),
                   train_seconds=seconds)


def predict(model, x):

    '''
    Prediction of a KTree or KForest.

    :x:
        A feature vector, or an array with one feature vector per row.

    Returns:
        The target vector (leaf mean of a tree, average over the trees of
        a forest), or an array of them if x is 2D.
    '''

    x = np.asarray(x, dtype=np.float64)
    out = model.predict(x)
    return out[0] if x.ndim == 1 else out


def leaf_codes(forest, X):

    '''
    Binary leaf encoding of many feature vectors.

    Returns:
        A scipy CSR matrix of shape (num_samples, forest.code_length); row i
        holds a one at the leaf reached by X[i] in every tree, leaves of
        consecutive trees occupying consecutive column ranges.
    '''

    X = _as_features(X, forest.n_features)
    n = len(X)
    offsets = np.cumsum([0] + [t.n_leaves for t in forest.trees[:-1]])
    cols = np.stack([off + t.apply(X) for off, t in zip(offsets, forest.trees)], axis=1)
    rows = np.repeat(np.arange(n), len(forest.trees))
    data = np.ones(cols.size)
    return sp.csr_matrix((data, (rows, cols.ravel())), shape=(n, forest.code_length))


def leaf_code(forest, x):

    '''
    Binary leaf encoding of a single feature vector: a 1 x code_length
    sparse row with exactly one nonzero entry per tree.
    '''

    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("leaf_code expects a single feature vector")
    return leaf_codes(forest, x[None, :])


def forest_to_arrays(forest, prefix=""):

    '''
    Flattens a forest for storage in a model container.

    Returns:
        A tuple (meta, arrays); array names start with prefix.
    '''

    meta = {"format": FOREST_FORMAT,
            "bagging_fraction": float(forest.bagging_fraction),
            "seed": int(forest.seed),
            "trees": []}
    arrays = {}
    for i, t in enumerate(forest.trees):
        meta["trees"].append({"K": int(t.K), "max_depth": int(t.max_depth),
                              "min_samples": int(t.min_samples), "n_features": int(t.n_features)})
        for name in ("children", "split", "leaf", "coef", "intercept", "values"):
            arrays[f"{prefix}tree{i:04d}.{name}"] = getattr(t, name)
    return meta, arrays


def forest_from_arrays(meta, arrays, prefix=""):

    '''
    Inverse of forest_to_arrays.
    '''

    if meta.get("format") != FOREST_FORMAT:
        raise DataError(f"unsupported forest format {meta.get('format')}")
    trees = []
    for i, tmeta in enumerate(meta["trees"]):
        parts = {name: arrays[f"{prefix}tree{i:04d}.{name}"]
                 for name in ("children", "split", "leaf", "coef", "intercept", "values")}
        trees.append(KTree(**parts, **tmeta))
    return KForest(trees=tuple(trees), bagging_fraction=meta["bagging_fraction"], seed=meta["seed"])


def save_forest(forest, fname):

    '''
    Saves a forest to a container file (see store_tools for the layout).
    '''

    meta, arrays = forest_to_arrays(forest)
    write_container(fname, {"kind": "kforest", "forest": meta}, arrays)


def load_forest(fname):

    '''
    Loads a forest saved with save_forest.
    '''

    meta, arrays = read_container(fname)
    if meta.get("kind") != "kforest":
        raise DataError(f"{fname}: not a forest container")
    return forest_from_arrays(meta["forest"], arrays)
