"""Axis-aligned binary decision trees (CART) with entropy or Gini impurity."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import _kernels
from ._pykernels import TIE_EPS
from .errors import ConfigError, DataError, EmptyDatasetError, SchemaMismatchError

CRITERIA = {"entropy": 0, "gini": 1}
TREE_FORMAT = "ddx-tree/1"


def entropy(class_counts) -> float:
    """Shannon entropy in bits of a count vector."""
    counts = np.asarray(class_counts, dtype=np.int64)
    if counts.ndim != 1 or (counts < 0).any():
        raise DataError("class counts must be a non-negative vector")
    if counts.sum() == 0:
        raise DataError("entropy of an all-zero count vector is undefined")
    return float(_kernels.impurity(np.ascontiguousarray(counts), CRITERIA["entropy"]))


def gini(class_counts) -> float:
    counts = np.asarray(class_counts, dtype=np.int64)
    if counts.sum() == 0:
        raise DataError("gini of an all-zero count vector is undefined")
    return float(_kernels.impurity(np.ascontiguousarray(counts), CRITERIA["gini"]))


@dataclass(frozen=True)
class TreeHyperparams:
    criterion: str = "entropy"
    max_depth: int = 10
    min_samples_leaf: int = 2
    min_samples_split: int = 7

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {sorted(CRITERIA)}")
        if self.max_depth < 1 or self.min_samples_leaf < 1 or self.min_samples_split < 2:
            raise ConfigError("max_depth >= 1, min_samples_leaf >= 1, min_samples_split >= 2 required")


@dataclass(frozen=True, eq=False)
class DecisionTreeModel:
    """Flat node arrays; node 0 is the root, leaves have ``feature == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    class_counts: np.ndarray
    n_samples: np.ndarray
    impurity: np.ndarray
    n_classes: int
    n_features: int
    schema_fingerprint: str
    hyperparams: TreeHyperparams
    importance_raw: np.ndarray  # accumulated weighted impurity decrease per feature

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def used_features(self) -> np.ndarray:
        return np.unique(self.feature[self.feature >= 0])

    def apply(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise SchemaMismatchError(f"expected {self.n_features} features, got {X.shape[1]}")
        return _kernels.apply_tree(X, self.feature, self.threshold, self.left, self.right)

    def predict_proba(self, X) -> np.ndarray:
        counts = self.class_counts[self.apply(X)].astype(np.float64)
        return counts / counts.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    # ------------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            leaf = self.feature[i] < 0
            nodes.append({
                "feature": int(self.feature[i]),
                "threshold": None if leaf else float(self.threshold[i]),
                "left": int(self.left[i]),
                "right": int(self.right[i]),
                "class_counts": [int(c) for c in self.class_counts[i]],
                "n_samples": int(self.n_samples[i]),
                "impurity": float(self.impurity[i]),
            })
        return {
            "format": TREE_FORMAT,
            "schema_fingerprint": self.schema_fingerprint,
            "hyperparams": asdict(self.hyperparams),
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "importance_raw": [float(v) for v in self.importance_raw],
            "nodes": nodes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTreeModel":
        if d.get("format") != TREE_FORMAT:
            raise DataError(f"unsupported tree format {d.get('format')!r}")
        nodes = d["nodes"]
        return cls(
            feature=np.array([n["feature"] for n in nodes], dtype=np.intp),
            threshold=np.array([np.nan if n["threshold"] is None else n["threshold"] for n in nodes]),
            left=np.array([n["left"] for n in nodes], dtype=np.intp),
            right=np.array([n["right"] for n in nodes], dtype=np.intp),
            class_counts=np.array([n["class_counts"] for n in nodes], dtype=np.int64).reshape(len(nodes), d["n_classes"]),
            n_samples=np.array([n["n_samples"] for n in nodes], dtype=np.int64),
            impurity=np.array([n["impurity"] for n in nodes]),
            n_classes=d["n_classes"],
            n_features=d["n_features"],
            schema_fingerprint=d["schema_fingerprint"],
            hyperparams=TreeHyperparams(**d["hyperparams"]),
            importance_raw=np.array(d["importance_raw"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def fit_tree_arrays(X: np.ndarray, y: np.ndarray, n_classes: int, hp: TreeHyperparams = TreeHyperparams(),
                    fingerprint: str = "") -> DecisionTreeModel:
    """Grow a tree depth-first; nodes are numbered in preorder."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.intp)
    n, n_feat = X.shape
    if n == 0:
        raise EmptyDatasetError("cannot fit a tree on zero rows")
    crit = CRITERIA[hp.criterion]
    feature, threshold, left, right, counts, sizes, imp = [], [], [], [], [], [], []
    importance = np.zeros(n_feat)

    def grow(idx, depth):
        """Returns True when the subtree holds at least one positive-gain split."""
        node = len(feature)
        cc = np.bincount(y[idx], minlength=n_classes).astype(np.int64)
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        counts.append(cc)
        sizes.append(idx.size)
        imp.append(_kernels.impurity(cc, crit))
        if depth >= hp.max_depth or idx.size < hp.min_samples_split or np.count_nonzero(cc) <= 1:
            return False
        f, thr, gain = _kernels.best_split(X[idx], y[idx], n_classes, crit, hp.min_samples_leaf)
        if f < 0:
            return False
        go_left = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = node + 1
        useful = grow(idx[go_left], depth + 1)
        right[node] = len(feature)
        useful = grow(idx[~go_left], depth + 1) or useful
        if gain > TIE_EPS:
            importance[f] += idx.size / n * gain
            return True
        if not useful:
            # a zero-gain split survives only if it unlocks a real split below (XOR)
            for arr in (feature, threshold, left, right, counts, sizes, imp):
                del arr[node + 1:]
            feature[node], threshold[node], left[node], right[node] = -1, np.nan, -1, -1
        return useful

    grow(np.arange(n, dtype=np.intp), 0)
    return DecisionTreeModel(
        feature=np.array(feature, dtype=np.intp),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.intp),
        right=np.array(right, dtype=np.intp),
        class_counts=np.array(counts, dtype=np.int64).reshape(len(counts), n_classes),
        n_samples=np.array(sizes, dtype=np.int64),
        impurity=np.array(imp, dtype=np.float64),
        n_classes=n_classes,
        n_features=n_feat,
        schema_fingerprint=fingerprint,
        hyperparams=hp,
        importance_raw=importance,
    )


def fit_tree(train, hp: TreeHyperparams = TreeHyperparams()) -> DecisionTreeModel:
    """Fit on a :class:`~ddx.dataset.Dataset`."""
    return fit_tree_arrays(train.X, train.y, train.n_classes, hp, train.fingerprint)


def feature_importances(model: DecisionTreeModel) -> np.ndarray:
    total = model.importance_raw.sum()
    if total <= 0:
        return np.zeros(model.n_features)
    return model.importance_raw / total


def ranked_importances(model: DecisionTreeModel, names, drop_zero: bool = True) -> list:
    """[(rank, name, importance)] in descending order, ties by feature index."""
    imp = feature_importances(model)
    order = sorted(range(len(imp)), key=lambda i: (-imp[i], i))
    rows = [(names[i], float(imp[i])) for i in order if imp[i] > 0 or not drop_zero]
    return [(r + 1, name, value) for r, (name, value) in enumerate(rows)]
