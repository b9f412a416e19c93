"""Flow feature tables: loading, cleaning, splitting and preprocessing operators."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    CsvParseError,
    DataError,
    EmptyDatasetError,
    GenomeInfeasibleError,
    MissingColumnError,
    SchemaMismatchError,
    UnknownLabelError,
)
from .flowmeter import FlowAssemblyConfig, assemble_flows, compute_features, feature_schema, names_fingerprint

LABEL_COLUMN = "label"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with integer labels.

    ``space`` names the chain of transforms that produced ``X`` ("raw" for
    extracted features); it is part of the fingerprint so a model fitted on
    scaled data cannot be applied to raw rows by accident.
    """

    features: tuple
    X: np.ndarray
    y: np.ndarray
    class_names: tuple
    space: str = "raw"

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.intp)
        if X.ndim != 2 or X.shape[1] != len(self.features):
            raise DataError(f"matrix shape {X.shape} does not match {len(self.features)} features")
        if y.shape != (X.shape[0],):
            raise DataError("row count and label count differ")
        if y.size and (y.min() < 0 or y.max() >= len(self.class_names)):
            raise DataError("class id out of range")
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def fingerprint(self) -> str:
        return names_fingerprint((*self.features, f"@{self.space}"))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return replace(self, X=self.X[idx], y=self.y[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)


# --------------------------------------------------------------------------- construction


def dataset_from_vectors(vectors, class_names: Optional[Sequence[str]] = None) -> Dataset:
    vectors = list(vectors)
    labels = [v.label for v in vectors]
    names, y = encode_labels(labels, None if class_names is None else {n: i for i, n in enumerate(class_names)})
    X = np.vstack([v.values for v in vectors]) if vectors else np.empty((0, len(feature_schema())))
    return Dataset(feature_schema().names, X, y, names)


def dataset_from_packets(packets, cfg: FlowAssemblyConfig = FlowAssemblyConfig(),
                         class_names: Sequence[str] = ("benign", "dos_slowloris")) -> Dataset:
    flows = assemble_flows(packets, cfg)
    return dataset_from_vectors((compute_features(f, cfg) for f in flows), class_names)


def encode_labels(labels: Sequence, mapping: Optional[dict] = None):
    """Map label strings to ids; first-seen order unless ``mapping`` is given."""
    if mapping is None:
        mapping = {}
        for lab in labels:
            if lab is None or lab == "":
                raise UnknownLabelError("empty label")
            mapping.setdefault(lab, len(mapping))
    names = [None] * len(mapping)
    for name, i in mapping.items():
        names[i] = name
    y = np.empty(len(labels), dtype=np.intp)
    for r, lab in enumerate(labels):
        if lab not in mapping:
            raise UnknownLabelError(f"row {r + 1}: label {lab!r} not in mapping")
        y[r] = mapping[lab]
    return tuple(names), y


def read_label_mapping(path) -> dict:
    """Parse ``name=id`` lines; ids must be 0..n-1."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected name=id")
        try:
            mapping[name.strip()] = int(value)
        except ValueError:
            raise DataError(f"{path}:{lineno}: id {value!r} is not an integer") from None
    if sorted(mapping.values()) != list(range(len(mapping))):
        raise DataError(f"{path}: label ids must be exactly 0..{len(mapping) - 1}")
    return mapping


def write_label_mapping(path, class_names: Sequence[str]):
    Path(path).write_text("".join(f"{n}={i}\n" for i, n in enumerate(class_names)))


def read_features_csv(path, expected: Optional[Sequence[str]] = None, label_column: str = LABEL_COLUMN,
                      require_label: bool = True):
    """Returns (feature names in expected order, matrix, raw labels or None).

    Columns may appear in any order; columns outside ``expected`` are
    ignored.
    """
    expected = tuple(feature_schema().names if expected is None else expected)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        pos = {name.strip(): i for i, name in enumerate(header)}
        for name in expected:
            if name not in pos:
                raise MissingColumnError(name)
        if require_label and label_column not in pos:
            raise MissingColumnError(label_column)
        cols = [pos[name] for name in expected]
        lab_col = pos.get(label_column)
        rows, labels = [], []
        for r, record in enumerate(reader, 1):
            if not record:
                continue
            if len(record) != len(header):
                raise DataError(f"row {r}: expected {len(header)} cells, found {len(record)}")
            row = []
            for name, c in zip(expected, cols):
                try:
                    row.append(float(record[c]))
                except ValueError:
                    raise CsvParseError(r, name, record[c]) from None
            rows.append(row)
            if lab_col is not None:
                labels.append(record[lab_col])
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(expected))
    return expected, X, (labels if lab_col is not None else None)


def load_flows_csv(path, expected: Optional[Sequence[str]] = None, mapping: Optional[dict] = None) -> Dataset:
    names, X, labels = read_features_csv(path, expected)
    class_names, y = encode_labels(labels, mapping)
    return Dataset(names, X, y, class_names)


def write_dataset_csv(ds: Dataset, path):
    from .flowmeter import _fmt

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*ds.features, LABEL_COLUMN])
        for row, label in zip(ds.X, ds.y):
            w.writerow([*(_fmt(v) for v in row), ds.class_names[label]])


def clean(ds: Dataset):
    """Drop rows holding NaN or infinities; returns (dataset, dropped count)."""
    keep = np.isfinite(ds.X).all(axis=1)
    dropped = int((~keep).sum())
    if dropped == 0:
        return ds, 0
    if not keep.any():
        raise EmptyDatasetError(f"all {len(ds)} rows contain non-finite values")
    return ds.subset(np.flatnonzero(keep)), dropped


# --------------------------------------------------------------------------- split


def stratified_split_indices(y: np.ndarray, n_classes: int, test_fraction: float, seed: int):
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    train, test = [], []
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        count = idx.size
        if count == 0:
            continue
        n_test = math.floor(count * test_fraction + 0.5)
        if count >= 2:
            n_test = min(max(n_test, 1), count - 1)
        else:
            n_test = 0
        perm = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, c]).permutation(idx)
        test.append(perm[:n_test])
        train.append(perm[n_test:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.intp)
    return cat(train), cat(test)


def stratified_split(ds: Dataset, test_fraction: float, seed: int):
    train_idx, test_idx = stratified_split_indices(ds.y, ds.n_classes, test_fraction, seed)
    return ds.subset(train_idx), ds.subset(test_idx)


def write_split_manifest(path, train_idx, test_idx, test_fraction: float, seed: int, extra: Optional[dict] = None):
    doc = {
        "seed": seed,
        "test_fraction": test_fraction,
        "train": [int(i) for i in train_idx],
        "test": [int(i) for i in test_idx],
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


# --------------------------------------------------------------------------- preprocessors

PREPROCESSOR_KINDS = ("min_max_scaler", "standard_scaler", "variance_threshold", "select_k_best")


@dataclass(frozen=True, eq=False)
class Preprocessor:
    kind: str
    params: dict
    input_features: tuple
    input_space: str
    output_features: tuple
    state: dict = field(default_factory=dict)

    @property
    def mask(self) -> Optional[np.ndarray]:
        return self.state.get("mask")

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.kind == "min_max_scaler":
            lo, span = self.state["data_min"], self.state["data_range"]
            safe = np.where(span > 0, span, 1.0)
            return np.where(span > 0, (X - lo) / safe, 0.0)
        if self.kind == "standard_scaler":
            mean, std = self.state["mean"], self.state["std"]
            safe = np.where(std > 0, std, 1.0)
            return np.where(std > 0, (X - mean) / safe, 0.0)
        return X[:, self.state["mask"]]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params,
            "input_features": list(self.input_features),
            "input_space": self.input_space,
            "output_features": list(self.output_features),
            "state": {k: np.asarray(v).tolist() for k, v in self.state.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        state = {}
        for k, v in d["state"].items():
            state[k] = np.asarray(v, dtype=bool if k == "mask" else np.float64)
        return cls(d["kind"], dict(d["params"]), tuple(d["input_features"]), d["input_space"],
                   tuple(d["output_features"]), state)


def f_scores(X: np.ndarray, y: np.ndarray, n_classes: int) -> np.ndarray:
    """One-way ANOVA F statistic per column; +inf for zero within-class spread."""
    n = X.shape[0]
    present = [c for c in range(n_classes) if np.any(y == c)]
    k = len(present)
    grand = X.mean(axis=0)
    ssb = np.zeros(X.shape[1])
    ssw = np.zeros(X.shape[1])
    for c in present:
        Xc = X[y == c]
        mc = Xc.mean(axis=0)
        ssb += Xc.shape[0] * (mc - grand) ** 2
        ssw += ((Xc - mc) ** 2).sum(axis=0)
    if k < 2:
        return np.zeros(X.shape[1])
    dfb, dfw = k - 1, n - k
    if dfw <= 0:
        return ssb / dfb
    out = np.zeros(X.shape[1])
    pos = ssw > 0
    out[pos] = (ssb[pos] / dfb) / (ssw[pos] / dfw)
    out[~pos & (ssb > 0)] = np.inf
    return out


def fit_preprocessor(kind: str, params: Optional[dict], train: Dataset) -> Preprocessor:
    params = dict(params or {})
    if len(train) == 0:
        raise EmptyDatasetError("cannot fit a preprocessor on an empty dataset")
    X = train.X
    n_feat = X.shape[1]
    space = f"{train.space}>{kind}"
    if kind == "min_max_scaler":
        lo = X.min(axis=0)
        state = {"data_min": lo, "data_range": X.max(axis=0) - lo}
        return Preprocessor(kind, params, train.features, train.space, train.features, state)
    if kind == "standard_scaler":
        state = {"mean": X.mean(axis=0), "std": X.std(axis=0)}
        return Preprocessor(kind, params, train.features, train.space, train.features, state)
    if kind == "variance_threshold":
        theta = float(params.get("threshold", 0.0))
        mask = X.var(axis=0) > theta
        if not mask.any():
            raise GenomeInfeasibleError(f"variance_threshold({theta}) removes every feature")
    elif kind == "select_k_best":
        k = params.get("k", 10)
        k = n_feat if k == "all" else int(k)
        if k > n_feat or k < 1:
            raise GenomeInfeasibleError(f"select_k_best k={k} but {n_feat} features are available")
        scores = f_scores(X, train.y, train.n_classes)
        order = np.lexsort((np.arange(n_feat), -scores))
        mask = np.zeros(n_feat, dtype=bool)
        mask[order[:k]] = True
        out = tuple(np.asarray(train.features)[mask])
        return Preprocessor(kind, params, train.features, train.space, out,
                            {"mask": mask, "scores": np.where(np.isinf(scores), np.finfo(float).max, scores)})
    else:
        raise DataError(f"unknown preprocessor kind {kind!r}")
    out = tuple(np.asarray(train.features)[mask])
    return Preprocessor(kind, params, train.features, train.space, out, {"mask": mask})


def apply_preprocessor(p: Preprocessor, ds: Dataset) -> Dataset:
    if ds.features != p.input_features or ds.space != p.input_space:
        raise SchemaMismatchError(f"{p.kind} was fitted on a different feature space")
    return Dataset(p.output_features, p.transform(ds.X), ds.y, ds.class_names, f"{ds.space}>{p.kind}")
