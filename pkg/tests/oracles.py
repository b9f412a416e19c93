"""Reference implementations used only by the tests.

They share no code with the package: weights, coalitions and impurities are
computed here from their definitions.
"""
import itertools
import math
from fractions import Fraction

import numpy as np

from ddx.cart import TreeHyperparams, fit_tree_arrays


def coalition_value(predict, x, background, S):
    Z = np.array(background, dtype=float)
    for i in S:
        Z[:, i] = x[i]
    return float(np.mean(predict(Z)))


def brute_force_shapley(predict, x, background):
    """phi_i = sum over S not containing i of |S|!(m-|S|-1)!/m! [f(S+i) - f(S)]."""
    m = len(x)
    cache = {}

    def f(S):
        if S not in cache:
            cache[S] = coalition_value(predict, x, background, S)
        return cache[S]

    phi = []
    for i in range(m):
        others = [j for j in range(m) if j != i]
        total = []
        for size in range(m):
            weight = Fraction(1, m) / math.comb(m - 1, size)
            for S in itertools.combinations(others, size):
                with_i = tuple(sorted(S + (i,)))
                total.append(float(weight) * (f(with_i) - f(S)))
        phi.append(math.fsum(total))
    return np.array(phi), f(()), f(tuple(range(m)))


def entropy_bits(counts):
    n = sum(counts)
    return -sum(c / n * math.log2(c / n) for c in counts if c)


def exhaustive_root_split(X, y, n_classes, min_leaf):
    """Best (feature, midpoint, gain); the first in (feature, threshold) order wins ties."""
    n = len(y)
    parent = entropy_bits(np.bincount(y, minlength=n_classes))
    best = None
    for f in range(X.shape[1]):
        values = sorted(set(X[:, f].tolist()))
        for a, b in zip(values, values[1:]):
            thr = (a + b) / 2
            mask = X[:, f] <= thr
            nl = int(mask.sum())
            if nl < min_leaf or n - nl < min_leaf:
                continue
            il = entropy_bits(np.bincount(y[mask], minlength=n_classes))
            ir = entropy_bits(np.bincount(y[~mask], minlength=n_classes))
            gain = parent - (nl * il + (n - nl) * ir) / n
            if best is None or gain > best[2] + 1e-12:
                best = (f, thr, gain)
    return best


def random_tree_case(rng, n_features, depth=4, n_rows=120, n_background=None):
    """A fitted tree, an instance and a background sample over ``n_features`` columns."""
    X = rng.integers(0, 6, size=(n_rows, n_features)).astype(float)
    w = rng.normal(size=n_features)
    y = (X @ w + rng.normal(scale=1.0, size=n_rows) > np.median(X @ w)).astype(int)
    model = fit_tree_arrays(X, y, 2, TreeHyperparams(max_depth=depth, min_samples_leaf=1, min_samples_split=2))
    B = n_background or int(rng.integers(1, 9))
    background = X[rng.choice(n_rows, size=B, replace=False)]
    x = X[int(rng.integers(n_rows))]
    return model, x, background


def sampling_case():
    """8-feature tree with 32 background rows; every feature carries signal."""
    rng = np.random.default_rng(42)
    X = rng.normal(size=(400, 8))
    y = (X @ np.linspace(1.0, 0.3, 8) > 0).astype(int)
    model = fit_tree_arrays(X, y, 2, TreeHyperparams(max_depth=6, min_samples_leaf=2, min_samples_split=4))
    background = X[rng.choice(400, size=32, replace=False)]
    return model, X[0], background
