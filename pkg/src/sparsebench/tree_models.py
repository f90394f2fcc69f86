"""Regression trees, random forests and least-squares gradient boosting.

Splits maximise variance reduction over thresholds placed at midpoints between
consecutive distinct feature values. Ties (within a relative 1e-12) go to the
lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

RANDOM_FOREST = "RandomForest"
GRADIENT_BOOSTING = "GradientBoosting"
TIE_RTOL = 1e-12
LEAF = -1


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float


def best_split(X: np.ndarray, y: np.ndarray, features=None, min_samples_leaf: int = 1) -> Split | None:
    """Exact best variance-reduction split over ``features`` (all if None)."""
    n, p = X.shape
    feats = np.arange(p) if features is None else np.sort(np.asarray(features, dtype=int))
    if n < 2 * min_samples_leaf or n < 2 or feats.size == 0:
        return None
    Xs = X[:, feats]
    order = np.argsort(Xs, axis=0, kind="stable")
    xs = np.take_along_axis(Xs, order, axis=0)
    yc = y - y.mean()
    ys = yc[order]
    csum = np.cumsum(ys, axis=0)[:-1]
    total = float(yc.sum())
    n_left = np.arange(1, n)[:, None]
    n_right = n - n_left
    gain = csum**2 / n_left + (total - csum) ** 2 / n_right - total**2 / n
    valid = (xs[:-1] < xs[1:]) & (n_left >= min_samples_leaf) & (n_right >= min_samples_leaf)
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    best = gain.max()
    if not best > 0:
        return None
    near = gain >= best - TIE_RTOL * max(abs(best), 1e-300)
    col = int(np.argmax(near.any(axis=0)))
    row = int(np.argmax(near[:, col]))
    threshold = 0.5 * (xs[row, col] + xs[row + 1, col])
    return Split(int(feats[col]), float(threshold), float(gain[row, col]))


@dataclass
class RegressionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    max_depth: int | None = None
    min_samples_leaf: int = 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        rows = np.arange(X.shape[0])
        while True:
            internal = self.feature[node] != LEAF
            if not internal.any():
                return node
            r = rows[internal]
            nd = node[internal]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(np.asarray(X, dtype=float))]

    def to_json(self) -> dict:
        return {
            "feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
            "left": self.left.tolist(), "right": self.right.tolist(),
            "value": self.value.tolist(), "n_samples": self.n_samples.tolist(),
            "max_depth": self.max_depth, "min_samples_leaf": self.min_samples_leaf,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RegressionTree":
        return cls(
            np.asarray(d["feature"], dtype=int), np.asarray(d["threshold"], dtype=float),
            np.asarray(d["left"], dtype=int), np.asarray(d["right"], dtype=int),
            np.asarray(d["value"], dtype=float), np.asarray(d["n_samples"], dtype=int),
            d["max_depth"], d["min_samples_leaf"],
        )


def _n_candidate_features(max_features, p: int) -> int:
    if max_features is None:
        return p
    if max_features == "sqrt":
        return max(1, int(np.sqrt(p)))
    if isinstance(max_features, float):
        return max(1, int(max_features * p))
    return max(1, min(int(max_features), p))


def fit_tree(X, y, max_depth: int | None = None, min_samples_leaf: int = 1,
             max_features=None, rng: np.random.Generator | None = None) -> RegressionTree:
    """Greedy depth-first tree; node ids in creation order (left subtree first)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    k = _n_candidate_features(max_features, p)
    feature, threshold, left, right, value, counts = [], [], [], [], [], []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(y[idx].mean()))
        counts.append(len(idx))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if max_depth is not None and depth >= max_depth:
            continue
        yn = y[idx]
        if len(idx) < 2 * min_samples_leaf or np.all(yn == yn[0]):
            continue
        feats = None
        if k < p:
            if rng is None:
                raise ValueError("feature subsampling needs an rng")
            feats = rng.choice(p, size=k, replace=False)
        split = best_split(X[idx], yn, feats, min_samples_leaf)
        if split is None:
            continue
        mask = X[idx, split.feature] <= split.threshold
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = split.feature, split.threshold
        lnode = new_node(li)
        rnode = new_node(ri)
        left[node], right[node] = lnode, rnode
        # right pushed first so the left subtree is expanded first
        stack.append((rnode, ri, depth + 1))
        stack.append((lnode, li, depth + 1))

    return RegressionTree(
        np.asarray(feature, dtype=int), np.asarray(threshold), np.asarray(left, dtype=int),
        np.asarray(right, dtype=int), np.asarray(value), np.asarray(counts, dtype=int),
        max_depth, min_samples_leaf,
    )


@dataclass
class EnsembleFit:
    kind: str
    trees: list[RegressionTree]
    base_prediction: float
    n_features: int
    learning_rate: float = 1.0
    seed: int = 0
    layout_digest: str = ""
    train_mse: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.trees:
            raise ValueError("an ensemble needs at least one tree")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(getattr(X, "values", X), dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} columns, got {X.shape}")
        if self.kind == RANDOM_FOREST:
            return np.mean([t.predict(X) for t in self.trees], axis=0)
        out = np.full(X.shape[0], self.base_prediction)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind, "base_prediction": self.base_prediction,
            "learning_rate": self.learning_rate, "seed": self.seed,
            "n_features": self.n_features, "column_meta_digest": self.layout_digest,
            "trees": [t.to_json() for t in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> "EnsembleFit":
        d = json.loads(text)
        return cls(d["kind"], [RegressionTree.from_json(t) for t in d["trees"]], d["base_prediction"],
                   d["n_features"], d["learning_rate"], d["seed"], d["column_meta_digest"])


def predict(ens: EnsembleFit, X) -> np.ndarray:
    return ens.predict(X)


def fit_random_forest(X, y, n_trees: int = 100, max_depth: int | None = None,
                      min_samples_leaf: int = 1, max_features=None, seed: int = 0,
                      n_jobs: int = 1) -> EnsembleFit:
    """Bagged trees; tree t draws its bootstrap and feature subsets from the
    t-th child of ``SeedSequence(seed)``, so results do not depend on n_jobs."""
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    X = np.asarray(getattr(X, "values", X), dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    children = np.random.SeedSequence(seed).spawn(n_trees)

    def grow(ss):
        rng = np.random.default_rng(ss)
        boot = rng.integers(0, n, size=n)
        return fit_tree(X[boot], y[boot], max_depth, min_samples_leaf, max_features, rng)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            trees = list(pool.map(grow, children))
    else:
        trees = [grow(ss) for ss in children]
    return EnsembleFit(RANDOM_FOREST, trees, float(y.mean()), X.shape[1], 1.0, seed)


def fit_gradient_boosting(X, y, n_trees: int = 100, max_depth: int = 3, learning_rate: float = 0.1,
                          seed: int = 0, min_samples_leaf: int = 1) -> EnsembleFit:
    """Stagewise least-squares boosting from base = mean(y)."""
    if not 0 < learning_rate <= 1:
        raise ValueError(f"learning_rate must lie in (0, 1], got {learning_rate}")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    X = np.asarray(getattr(X, "values", X), dtype=float)
    y = np.asarray(y, dtype=float)
    base = float(y.mean())
    current = np.full(y.shape, base)
    trees, mse = [], []
    for _ in range(n_trees):
        tree = fit_tree(X, y - current, max_depth, min_samples_leaf)
        current = current + learning_rate * tree.predict(X)
        trees.append(tree)
        mse.append(float(np.mean((y - current) ** 2)))
    return EnsembleFit(GRADIENT_BOOSTING, trees, base, X.shape[1], learning_rate, seed, train_mse=mse)
