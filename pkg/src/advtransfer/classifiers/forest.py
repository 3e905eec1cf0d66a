"""Random forest of CART trees (Gini impurity, bootstrap, sqrt(n) features per split)."""
import math

import numpy as np

from ..errors import InvalidArguments
from .base import ClassifierModel, argmax_lowest

LEAF = -1


class Tree:
    """Binary tree in flat-array form.

    Internal node ``i`` sends ``x`` to ``left[i]`` when ``x[feature[i]] <= threshold[i]``
    and to ``right[i]`` otherwise. Leaves have ``feature == -1`` and carry ``value``.
    """

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.value = np.asarray(value, dtype=np.int32)
        k = self.feature.size
        if not all(a.size == k for a in (self.threshold, self.left, self.right, self.value)):
            raise InvalidArguments("tree arrays must share one length")

    @classmethod
    def leaf(cls, label):
        return cls([LEAF], [0.0], [LEAF], [LEAF], [label])

    @property
    def node_count(self):
        return int(self.feature.size)

    def predict(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[node] != LEAF
        while active.any():
            r = rows[active]
            n = node[active]
            go_left = X[r, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] != LEAF
        return self.value[node]

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("feature", "threshold", "left", "right", "value")
        )

    __hash__ = None


def _best_split(X, y, features, class_count):
    """Lowest weighted-Gini split over ``features``; ``None`` when no feature separates."""
    n = y.size
    best = None
    best_score = np.inf
    onehot = np.eye(class_count, dtype=np.float64)[y]
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        left_counts = np.cumsum(onehot[order], axis=0)[:-1]
        right_counts = left_counts[-1] + onehot[order[-1]] - left_counts
        n_left = np.arange(1, n, dtype=np.float64)
        n_right = n - n_left
        # n * weighted Gini = n_left - sum(l^2)/n_left + n_right - sum(r^2)/n_right
        score = (
            n
            - (left_counts ** 2).sum(axis=1) / n_left
            - (right_counts ** 2).sum(axis=1) / n_right
        )
        score = np.where(valid, score, np.inf)
        i = int(np.argmin(score))
        if score[i] < best_score - 1e-12:
            best_score = score[i]
            best = (int(f), 0.5 * (xs[i] + xs[i + 1]))
    return best


def build_tree(X, y, class_count, max_depth, gen, min_samples_split=2):
    n_features = X.shape[1]
    k = max(1, int(math.isqrt(n_features)))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for arr in (feature, left, right, value):
            arr.append(LEAF)
        threshold.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(y.size), 0)]
    # depth-first, left child first, so node numbering is deterministic
    while stack:
        node, idx, depth = stack.pop()
        counts = np.bincount(y[idx], minlength=class_count)
        value[node] = int(argmax_lowest(counts))
        if depth >= max_depth or idx.size < min_samples_split or np.count_nonzero(counts) == 1:
            continue
        feats = gen.choice(n_features, size=k, replace=False)
        split = _best_split(X[idx], y[idx], feats, class_count)
        if split is None:
            continue
        f, t = split
        mask = X[idx, f] <= t
        l, r = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, t, l, r
        stack.append((r, idx[~mask], depth + 1))
        stack.append((l, idx[mask], depth + 1))
    return Tree(feature, threshold, left, right, value)


class RandomForest(ClassifierModel):
    """Plurality vote over trees; ties go to the lowest class index. Label queries only."""

    kind = "forest"

    def __init__(self, trees, class_count, feature_dim, train_seed=0):
        super().__init__(class_count, feature_dim, train_seed)
        if not trees:
            raise InvalidArguments("forest needs at least one tree")
        self.trees = list(trees)

    def vote_counts(self, x):
        X = np.atleast_2d(self._check_input(x))
        votes = np.zeros((X.shape[0], self.class_count), dtype=np.int64)
        rows = np.arange(X.shape[0])
        for tree in self.trees:
            np.add.at(votes, (rows, tree.predict(X)), 1)
        return votes

    def _labels(self, X):
        return argmax_lowest(self.vote_counts(X), axis=1)

    def structure_equal(self, other):
        return (
            isinstance(other, RandomForest)
            and len(self.trees) == len(other.trees)
            and all(a == b for a, b in zip(self.trees, other.trees))
        )


def train_forest(ds, spec, rng):
    gen = rng.gen
    n = len(ds)
    trees = []
    for _ in range(spec.tree_count):
        boot = gen.integers(0, n, size=n)
        trees.append(build_tree(ds.features[boot], ds.labels[boot], ds.class_count, spec.max_depth, gen))
    return RandomForest(trees, ds.class_count, ds.feature_dim, train_seed=rng.seed64)
