"""Shapley attributions with an interventional (background-marginalized) value function.

The value of a coalition S is the mean model output over background rows
with the features in S replaced by the explained instance's values. Exact
mode enumerates every coalition; sampled mode averages marginal
contributions over random feature orderings.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import Dataset
from .errors import DataError, ExactLimitError, SchemaMismatchError

EXACT_LIMIT = 16
MAX_BATCH_ROWS = 65_536


@dataclass(frozen=True, eq=False)
class CoalitionValueFn:
    """f(S) for one instance.

    ``predict`` maps an (n, d) matrix to n outputs. ``players`` lists the
    features that take part in the game; all other features are dummies and
    get attribution 0 without evaluation.
    """

    predict: Callable[[np.ndarray], np.ndarray]
    x: np.ndarray
    background: np.ndarray
    players: Optional[np.ndarray] = None
    target_class: Optional[int] = None
    feature_names: Optional[tuple] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).ravel()
        bg = np.atleast_2d(np.asarray(self.background, dtype=np.float64))
        if bg.shape[0] < 1:
            raise DataError("background needs at least one row")
        if bg.shape[1] != x.size:
            raise SchemaMismatchError(f"background has {bg.shape[1]} features, instance has {x.size}")
        players = np.arange(x.size) if self.players is None else np.unique(np.asarray(self.players, dtype=np.intp))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "players", players)

    @property
    def n_features(self) -> int:
        return self.x.size

    def values_for_masks(self, masks: Sequence[int]) -> np.ndarray:
        """f(S) for coalitions given as bitmasks over ``players`` (bit k = players[k])."""
        masks = list(masks)
        B, d = self.background.shape
        m = len(self.players)
        out = np.empty(len(masks))
        per_chunk = max(1, MAX_BATCH_ROWS // B)
        for start in range(0, len(masks), per_chunk):
            chunk = masks[start:start + per_chunk]
            bits = _mask_bits(chunk, m)
            take = np.zeros((len(chunk), d), dtype=bool)
            take[:, self.players] = bits
            Z = np.where(take[:, None, :], self.x[None, None, :], self.background[None, :, :])
            y = np.asarray(self.predict(Z.reshape(-1, d)), dtype=np.float64)
            out[start:start + len(chunk)] = _row_means(y.reshape(len(chunk), B))
        return out


def _row_means(rows: np.ndarray) -> np.ndarray:
    # a constant row returns its value unrounded, so f(F) is exactly the model output
    means = rows.mean(axis=1)
    same = (rows == rows[:, :1]).all(axis=1)
    means[same] = rows[same, 0]
    return means


def _mask_bits(masks, m: int) -> np.ndarray:
    """Rows of booleans, bit k of each (arbitrarily wide) integer mask in column k."""
    nbytes = max(1, (m + 7) // 8)
    buf = b"".join(int(s).to_bytes(nbytes, "little") for s in masks)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(len(masks), nbytes)
    return np.unpackbits(raw, axis=1, bitorder="little")[:, :m].astype(bool)


def value_at_coalition(v: CoalitionValueFn, S) -> float:
    """Mean output over background rows b of the hybrid z with z_i = x_i for i in S, else b_i."""
    S = np.asarray(sorted(set(int(i) for i in S)), dtype=np.intp)
    if S.size and (S.min() < 0 or S.max() >= v.n_features):
        raise DataError("coalition refers to unknown features")
    Z = v.background.copy()
    Z[:, S] = v.x[S]
    return float(_row_means(np.asarray(v.predict(Z), dtype=np.float64)[None, :])[0])


def model_value_fn(fp, x, background, target_class: int, reduce: bool = True) -> CoalitionValueFn:
    """Value function for the ``target_class`` probability of a fitted pipeline."""
    players = fp.used_input_features() if reduce else None
    return CoalitionValueFn(lambda Z: fp.predict_proba(Z)[:, target_class], x, background,
                            players=players, target_class=target_class, feature_names=tuple(fp.input_features))


@dataclass(frozen=True, eq=False)
class ShapExplanation:
    phi: np.ndarray
    base_value: float
    output: float
    instance_id: Optional[int] = None
    target_class: Optional[int] = None
    method: str = "exact"
    n_permutations: int = 0
    feature_names: Optional[tuple] = None

    def efficiency_residual(self) -> float:
        return abs(math.fsum([*self.phi.tolist(), self.base_value]) - self.output)

    def to_dict(self, class_names: Optional[Sequence[str]] = None) -> dict:
        names = self.feature_names or tuple(f"f{i}" for i in range(len(self.phi)))
        cls = self.target_class
        return {
            "instance_id": self.instance_id,
            "class": class_names[cls] if class_names is not None and cls is not None else cls,
            "base_value": self.base_value,
            "output": self.output,
            "method": self.method,
            "n_permutations": self.n_permutations,
            "phi": {n: float(p) for n, p in zip(names, self.phi)},
        }


def shapley_weights(m: int) -> np.ndarray:
    """w[s] = s!(m-s-1)!/m! for coalitions of size s among m players."""
    fact = [math.factorial(k) for k in range(m + 1)]
    return np.array([float(Fraction(fact[s] * fact[m - s - 1], fact[m])) for s in range(m)])


def _popcount(a: np.ndarray) -> np.ndarray:
    c = np.zeros_like(a)
    b = a.copy()
    while b.any():
        c += b & 1
        b >>= 1
    return c


def exact_shapley(v: CoalitionValueFn, exact_limit: int = EXACT_LIMIT, instance_id: Optional[int] = None) -> ShapExplanation:
    m = len(v.players)
    if m > exact_limit:
        raise ExactLimitError(
            f"{m} features exceed the exact limit of {exact_limit}; use sampled mode (--permutations)")
    phi = np.zeros(v.n_features)
    masks = np.arange(1 << m, dtype=np.int64)
    vals = v.values_for_masks(masks.tolist())
    if m:
        w = shapley_weights(m)
        size = _popcount(masks)
        for k in range(m):
            without = masks[((masks >> k) & 1) == 0]
            terms = w[size[without]] * (vals[without | (1 << k)] - vals[without])
            phi[v.players[k]] = math.fsum(terms.tolist())
    return ShapExplanation(phi, float(vals[0]), float(vals[-1]), instance_id, v.target_class, "exact", 0,
                           v.feature_names)


def sampled_shapley(v: CoalitionValueFn, n_permutations: int, seed: int,
                    instance_id: Optional[int] = None) -> ShapExplanation:
    if n_permutations < 1:
        raise DataError("n_permutations must be >= 1")
    m = len(v.players)
    rng = np.random.default_rng(seed)
    orders = [rng.permutation(m) for _ in range(n_permutations)]
    # coalition bitmasks along each ordering, including the empty and full sets
    chains = []
    needed = {0}
    for order in orders:
        chain = [0]
        for k in order:
            chain.append(chain[-1] | (1 << int(k)))
        chains.append(chain)
        needed.update(chain)
    keys = sorted(needed)
    table = dict(zip(keys, v.values_for_masks(keys)))
    contrib = [[] for _ in range(m)]
    for order, chain in zip(orders, chains):
        for pos, k in enumerate(order):
            contrib[k].append(table[chain[pos + 1]] - table[chain[pos]])
    phi = np.zeros(v.n_features)
    for k in range(m):
        phi[v.players[k]] = math.fsum(contrib[k]) / n_permutations
    full = (1 << m) - 1
    output = table[full] if full in table else float(v.values_for_masks([full])[0])
    return ShapExplanation(phi, float(table[0]), float(output), instance_id, v.target_class, "sampled",
                           n_permutations, v.feature_names)


def sample_background(ds: Dataset, n: int, seed: int) -> np.ndarray:
    """``n`` rows drawn without replacement (all rows when n >= len)."""
    if n < 1:
        raise DataError("background size must be >= 1")
    if n >= len(ds):
        return ds.X.copy()
    idx = np.sort(np.random.default_rng([seed, 0xBA]).choice(len(ds), size=n, replace=False))
    return ds.X[idx]


# --------------------------------------------------------------------------- summaries


@dataclass(frozen=True)
class ShapSummary:
    """Per class: [(rank, feature, mean |phi|)] in descending order."""

    classes: dict = field(default_factory=dict)

    def top(self, cls, k: int) -> list:
        return [name for _, name, _ in self.classes[cls][:k]]


def shap_summary(explanations: Sequence[ShapExplanation], class_names: Optional[Sequence[str]] = None) -> ShapSummary:
    explanations = list(explanations)
    if not explanations:
        raise DataError("cannot summarize an empty list of explanations")
    d = len(explanations[0].phi)
    names = explanations[0].feature_names or tuple(f"f{i}" for i in range(d))
    groups = {}
    for e in explanations:
        if len(e.phi) != d or (e.feature_names or names) != names:
            raise SchemaMismatchError("explanations use different feature sets")
        groups.setdefault(e.target_class, []).append(np.abs(e.phi))
    out = {}
    for cls in sorted(groups, key=lambda c: (c is None, c)):
        mean_abs = np.mean(groups[cls], axis=0)
        order = sorted(range(d), key=lambda i: (-mean_abs[i], i))
        label = class_names[cls] if class_names is not None and cls is not None else cls
        out[label] = [(r + 1, names[i], float(mean_abs[i])) for r, i in enumerate(order)]
    return ShapSummary(out)


def write_explanations_json(path, explanations, class_names=None, meta: Optional[dict] = None):
    doc = {"explanations": [e.to_dict(class_names) for e in explanations]}
    if meta is not None:
        doc["meta"] = meta
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def write_summary_csv(path, summary: ShapSummary):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "feature", "mean_abs_phi", "rank"])
        for cls, rows in summary.classes.items():
            for rank, name, value in rows:
                w.writerow([cls, name, repr(value), rank])
