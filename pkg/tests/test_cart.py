import json
import math

import numpy as np
import pytest

from ddx import _pykernels
from ddx.cart import (
    DecisionTreeModel,
    TreeHyperparams,
    entropy,
    feature_importances,
    fit_tree,
    fit_tree_arrays,
    gini,
    ranked_importances,
)
from ddx.dataset import Dataset
from ddx.errors import ConfigError, DataError, EmptyDatasetError, SchemaMismatchError

try:
    from ddx import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

REFERENCE_IMPORTANCES = [
    0.4903, 0.1913, 0.1024, 0.0621, 0.0380, 0.0230, 0.0201, 0.0143, 0.0126, 0.0103, 0.0069, 0.0057,
    0.0053, 0.0049, 0.0030, 0.0027, 0.0023, 0.0013, 0.0011, 0.0010, 0.0007, 0.0003, 0.0002, 0.0002,
]


def oracle_entropy(counts):
    n = sum(counts)
    return -sum(c / n * math.log2(c / n) for c in counts if c)


def oracle_root_split(X, y, n_classes, min_leaf):
    """Exhaustive (feature, midpoint) search, first best in (feature, threshold) order."""
    n = len(y)
    parent = oracle_entropy(np.bincount(y, minlength=n_classes))
    best = None
    for f in range(X.shape[1]):
        values = sorted(set(X[:, f].tolist()))
        for a, b in zip(values, values[1:]):
            thr = (a + b) / 2
            mask = X[:, f] <= thr
            nl = int(mask.sum())
            if nl < min_leaf or n - nl < min_leaf:
                continue
            il = oracle_entropy(np.bincount(y[mask], minlength=n_classes))
            ir = oracle_entropy(np.bincount(y[~mask], minlength=n_classes))
            gain = parent - (nl * il + (n - nl) * ir) / n
            if best is None or gain > best[2] + 1e-12:
                best = (f, thr, gain)
    return best


# ---------------------------------------------------------------- impurity


def test_entropy_identities():
    assert entropy([8, 8]) == 1.0
    assert entropy([5, 0]) == 0.0
    assert abs(entropy([9, 5]) - 0.940286) <= 1e-6
    for k in range(2, 12):
        assert abs(entropy([7] * k) - math.log2(k)) <= 1e-12


def test_entropy_matches_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = rng.integers(0, 50, size=rng.integers(1, 7))
        if c.sum() == 0:
            continue
        assert abs(entropy(c) - oracle_entropy(c.tolist())) <= 1e-12


def test_gini_values():
    assert gini([5, 5]) == 0.5
    assert gini([3, 0]) == 0.0


def test_entropy_rejects_empty():
    with pytest.raises(DataError):
        entropy([0, 0])


def test_hyperparams_validated():
    with pytest.raises(ConfigError):
        TreeHyperparams(criterion="mse")
    with pytest.raises(ConfigError):
        TreeHyperparams(max_depth=0)


# ---------------------------------------------------------------- fitting


def test_xor_depth_two():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 3, dtype=float)
    y = np.array([0, 1, 1, 0] * 3)
    m = fit_tree_arrays(X, y, 2, TreeHyperparams(max_depth=2, min_samples_leaf=1, min_samples_split=2))
    assert (m.predict(X) == y).all()
    assert m.depth() == 2


def test_single_class_is_one_leaf():
    m = fit_tree_arrays(np.random.default_rng(1).normal(size=(20, 3)), np.zeros(20, int), 2)
    assert m.n_nodes == 1
    assert m.predict(np.zeros((1, 3))).tolist() == [0]
    assert feature_importances(m).tolist() == [0.0, 0.0, 0.0]


def test_threshold_rule():
    X = np.array([[1.0], [2], [3], [5], [6], [7]])
    y = (X[:, 0] > 3).astype(int)
    m = fit_tree_arrays(X, y, 2, TreeHyperparams(min_samples_leaf=1, min_samples_split=2))
    assert m.feature[0] == 0 and 3 < m.threshold[0] <= 5


def test_root_matches_exhaustive_search():
    rng = np.random.default_rng(2024)
    for case in range(40):
        n = int(rng.integers(8, 200))
        d = int(rng.integers(1, 7))
        k = int(rng.integers(2, 4))
        X = rng.integers(0, 12, size=(n, d)).astype(float) / 4
        y = rng.integers(0, k, size=n)
        leaf = int(rng.integers(1, 4))
        expected = oracle_root_split(X, y, k, leaf)
        m = fit_tree_arrays(X, y, k, TreeHyperparams(max_depth=1, min_samples_leaf=leaf, min_samples_split=2))
        if expected is None or expected[2] <= 1e-12:
            assert m.n_nodes == 1
            continue
        assert m.feature[0] == expected[0], case
        assert m.threshold[0] == expected[1], case


def test_structure_invariants(synthetic_dataset):
    m = fit_tree(synthetic_dataset)
    assert m.depth() <= 10
    for i in range(m.n_nodes):
        if m.feature[i] >= 0:
            assert (m.class_counts[i] == m.class_counts[m.left[i]] + m.class_counts[m.right[i]]).all()
        else:
            assert m.n_samples[i] >= 2
    leaves = m.apply(synthetic_dataset.X)
    rows = synthetic_dataset.X
    for i in range(len(rows)):
        node = 0
        while m.feature[node] >= 0:
            node = m.left[node] if rows[i, m.feature[node]] <= m.threshold[node] else m.right[node]
        assert node == leaves[i]


def test_deterministic(synthetic_dataset):
    a, b = fit_tree(synthetic_dataset), fit_tree(synthetic_dataset)
    assert a.to_json() == b.to_json()


def test_fit_empty():
    with pytest.raises(EmptyDatasetError):
        fit_tree_arrays(np.zeros((0, 2)), np.zeros(0, int), 2)


# ---------------------------------------------------------------- prediction


def leaf_model(counts):
    return DecisionTreeModel(
        feature=np.array([-1]), threshold=np.array([np.nan]), left=np.array([-1]), right=np.array([-1]),
        class_counts=np.array([counts]), n_samples=np.array([sum(counts)]), impurity=np.array([0.0]),
        n_classes=len(counts), n_features=1, schema_fingerprint="", hyperparams=TreeHyperparams(),
        importance_raw=np.zeros(1),
    )


def test_leaf_probabilities():
    assert leaf_model([3, 1]).predict_proba([[0.0]]).tolist() == [[0.75, 0.25]]
    assert leaf_model([0, 4]).predict_proba([[0.0]]).tolist() == [[0.0, 1.0]]
    assert leaf_model([2, 2]).predict([[0.0]]).tolist() == [0]


def test_probabilities_sum_to_one(synthetic_dataset):
    p = fit_tree(synthetic_dataset).predict_proba(synthetic_dataset.X)
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-12


def test_dimension_mismatch():
    with pytest.raises(SchemaMismatchError):
        leaf_model([1, 1]).predict([[0.0, 1.0]])


# ---------------------------------------------------------------- importances


def test_single_feature_importance():
    X = np.column_stack([np.arange(20.0), np.zeros(20)])
    y = (X[:, 0] > 9).astype(int)
    m = fit_tree_arrays(X, y, 2)
    assert feature_importances(m).tolist() == [1.0, 0.0]
    assert ranked_importances(m, ["a", "b"]) == [(1, "a", 1.0)]


def test_importances_normalized(synthetic_dataset):
    imp = feature_importances(fit_tree(synthetic_dataset))
    assert (imp >= 0).all() and abs(imp.sum() - 1) <= 1e-9


def test_importance_equals_weighted_gain_sum():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(150, 4))
    y = (X[:, 0] + 0.5 * X[:, 2] > 0).astype(int)
    m = fit_tree_arrays(X, y, 2, TreeHyperparams(max_depth=4))
    raw = np.zeros(4)
    n = m.n_samples[0]
    for i in range(m.n_nodes):
        if m.feature[i] >= 0:
            l, r = m.left[i], m.right[i]
            child = (m.n_samples[l] * m.impurity[l] + m.n_samples[r] * m.impurity[r]) / m.n_samples[i]
            raw[m.feature[i]] += m.n_samples[i] / n * (m.impurity[i] - child)
    assert np.allclose(raw, m.importance_raw, rtol=0, atol=1e-12)


def test_reference_importances_sum_to_one():
    assert len(REFERENCE_IMPORTANCES) == 24
    assert abs(sum(REFERENCE_IMPORTANCES) - 1.0) <= 0.001


def test_ranking_ties_by_index():
    m = leaf_model([1, 1])
    object.__setattr__(m, "importance_raw", np.array([0.0]))
    assert ranked_importances(m, ["a"]) == []
    assert ranked_importances(m, ["a"], drop_zero=False) == [(1, "a", 0.0)]


# ---------------------------------------------------------------- serialization


def test_json_round_trip_bit_exact(synthetic_dataset):
    m = fit_tree(synthetic_dataset)
    text = m.to_json()
    back = DecisionTreeModel.from_dict(json.loads(text))
    assert back.to_json() == text
    assert np.array_equal(back.threshold[m.feature >= 0], m.threshold[m.feature >= 0])
    assert np.array_equal(back.predict_proba(synthetic_dataset.X), m.predict_proba(synthetic_dataset.X))


# ---------------------------------------------------------------- backends


@pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")
def test_backends_agree_on_split_search():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n, d, k = int(rng.integers(2, 120)), int(rng.integers(1, 6)), int(rng.integers(2, 5))
        X = np.ascontiguousarray(rng.integers(0, 9, size=(n, d)) / 3.0)
        y = np.ascontiguousarray(rng.integers(0, k, size=n), dtype=np.intp)
        for crit in (0, 1):
            leaf = int(rng.integers(1, 4))
            a = _pykernels.best_split(X, y, k, crit, leaf)
            b = _ckernels.best_split(X, y, k, crit, leaf)
            assert a[0] == b[0]
            if a[0] >= 0:
                assert a[1] == b[1] and abs(a[2] - b[2]) <= 1e-14


@pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")
def test_backends_agree_on_traversal(synthetic_dataset):
    m = fit_tree(synthetic_dataset)
    X = np.ascontiguousarray(synthetic_dataset.X)
    args = (X, m.feature, m.threshold, m.left, m.right)
    assert np.array_equal(_pykernels.apply_tree(*args), _ckernels.apply_tree(*args))
