"""Pipeline genomes (0-2 preprocessors + 1 classifier), execution and cross-validation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .cart import DecisionTreeModel, TreeHyperparams, fit_tree_arrays
from .dataset import Dataset, Preprocessor, apply_preprocessor, fit_preprocessor
from .errors import (
    ConfigError,
    CvInfeasibleError,
    GenomeInfeasibleError,
    PipelineFormatError,
    SchemaMismatchError,
)
from .flowmeter import names_fingerprint

PIPELINE_FORMAT = "ddx-pipeline/1"
MAX_PREPROCESSORS = 2
UNLIMITED_DEPTH = 50

DEFAULT_PREPROCESSORS = {
    "min_max_scaler": {},
    "standard_scaler": {},
    "variance_threshold": {"threshold": [0.0, 0.05, 0.1, 0.2]},
    "select_k_best": {"k": [5, 10, 15, 20, "all"]},
}
DEFAULT_CLASSIFIERS = {
    "decision_tree": {
        "criterion": ["entropy", "gini"],
        "max_depth": [3, 5, 10, None],
        "min_samples_leaf": [1, 2, 4],
        "min_samples_split": [2, 5, 7, 10],
    },
    "k_nearest_neighbors": {"n_neighbors": [1, 3, 5, 11], "weights": ["uniform", "distance"]},
    "gaussian_naive_bayes": {"var_smoothing": [1e-9, 1e-6]},
}


# --------------------------------------------------------------------------- genome


@dataclass(frozen=True)
class Gene:
    kind: str
    params: tuple = ()  # sorted (name, value) pairs

    @classmethod
    def make(cls, kind: str, **params) -> "Gene":
        return cls(kind, tuple(sorted(params.items())))

    @property
    def param_dict(self) -> dict:
        return dict(self.params)

    def encode(self) -> str:
        return f"{self.kind}(" + ",".join(f"{k}={v!r}" for k, v in self.params) + ")"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.param_dict}


@dataclass(frozen=True)
class PipelineGenome:
    """Preprocessing genes followed by exactly one classifier gene."""

    steps: tuple

    @property
    def preprocessors(self) -> tuple:
        return self.steps[:-1]

    @property
    def classifier(self) -> Gene:
        return self.steps[-1]

    def encode(self) -> str:
        """Canonical string; equal genomes have equal encodings."""
        return " > ".join(g.encode() for g in self.steps)

    def summary(self) -> str:
        return " -> ".join(g.encode() for g in self.steps)

    def __len__(self):
        return len(self.steps)

    def to_list(self) -> list:
        return [g.to_dict() for g in self.steps]

    @classmethod
    def from_list(cls, items) -> "PipelineGenome":
        return cls(tuple(Gene.make(d["kind"], **d.get("params", {})) for d in items))


@dataclass(frozen=True)
class OperatorSpace:
    preprocessors: dict = field(default_factory=lambda: DEFAULT_PREPROCESSORS)
    classifiers: dict = field(default_factory=lambda: DEFAULT_CLASSIFIERS)

    def validate(self, g: PipelineGenome) -> PipelineGenome:
        if not g.steps:
            raise ConfigError("genome has no classifier")
        if g.classifier.kind not in self.classifiers:
            raise ConfigError(f"last step must be a classifier, got {g.classifier.kind!r}")
        if len(g.preprocessors) > MAX_PREPROCESSORS:
            raise ConfigError(f"at most {MAX_PREPROCESSORS} preprocessing steps")
        kinds = [p.kind for p in g.preprocessors]
        if len(set(kinds)) != len(kinds):
            raise ConfigError(f"duplicate preprocessing kinds in {kinds}")
        for i, gene in enumerate(g.steps):
            grids = self.classifiers if i == len(g.steps) - 1 else self.preprocessors
            if gene.kind not in grids:
                raise ConfigError(f"{gene.kind!r} is not allowed at step {i}")
            grid = grids[gene.kind]
            params = gene.param_dict
            if set(params) != set(grid):
                raise ConfigError(f"{gene.kind} needs parameters {sorted(grid)}, got {sorted(params)}")
            for name, value in params.items():
                if not any(_same(value, v) for v in grid[name]):
                    raise ConfigError(f"{gene.kind}.{name}={value!r} is not in its grid")
        return g

    def random_gene(self, kind: str, rng) -> Gene:
        grid = self.preprocessors.get(kind) if kind in self.preprocessors else self.classifiers[kind]
        return Gene.make(kind, **{k: vals[int(rng.integers(len(vals)))] for k, vals in sorted(grid.items())})

    def random_genome(self, rng) -> PipelineGenome:
        n_pre = int(rng.integers(MAX_PREPROCESSORS + 1))
        kinds = list(self.preprocessors)
        chosen = [kinds[i] for i in rng.permutation(len(kinds))[:n_pre]]
        clf_kinds = list(self.classifiers)
        clf = clf_kinds[int(rng.integers(len(clf_kinds)))]
        return PipelineGenome(tuple(self.random_gene(k, rng) for k in chosen) + (self.random_gene(clf, rng),))


def _same(a, b) -> bool:
    if isinstance(a, bool) or isinstance(b, bool):
        return a is b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return a == b
    return type(a) is type(b) and a == b


def load_operator_space(path) -> OperatorSpace:
    """Grid file: JSON {"preprocessors": {kind: {param: [values]}}, "classifiers": {...}}.

    Missing sections keep the defaults; kinds must be known operators.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read grid file {path}: {e}") from e
    pre = doc.get("preprocessors", DEFAULT_PREPROCESSORS)
    clf = doc.get("classifiers", DEFAULT_CLASSIFIERS)
    for section, given, known in (("preprocessors", pre, DEFAULT_PREPROCESSORS), ("classifiers", clf, DEFAULT_CLASSIFIERS)):
        if not isinstance(given, dict) or (section == "classifiers" and not given):
            raise ConfigError(f"grid section {section!r} must be a non-empty object")
        for kind, grid in given.items():
            if kind not in known:
                raise ConfigError(f"unknown {section[:-1]} kind {kind!r} in grid file")
            if set(grid) != set(known[kind]) or any(not vals for vals in grid.values()):
                raise ConfigError(f"grid for {kind} must give non-empty lists for {sorted(known[kind])}")
    return OperatorSpace(pre, clf)


def reference_tree_genome() -> PipelineGenome:
    """Bare entropy tree with depth 10, leaf 2, split 7."""
    return PipelineGenome((Gene.make("decision_tree", criterion="entropy", max_depth=10,
                                     min_samples_leaf=2, min_samples_split=7),))


# --------------------------------------------------------------------------- classifiers


class TreeClassifier:
    kind = "decision_tree"

    def __init__(self, model: DecisionTreeModel):
        self.model = model

    @classmethod
    def fit(cls, params: dict, ds: Dataset) -> "TreeClassifier":
        depth = params["max_depth"]
        hp = TreeHyperparams(params["criterion"], UNLIMITED_DEPTH if depth is None else depth,
                             params["min_samples_leaf"], params["min_samples_split"])
        return cls(fit_tree_arrays(ds.X, ds.y, ds.n_classes, hp, ds.fingerprint))

    def predict_proba(self, X):
        return self.model.predict_proba(X)

    def used_features(self):
        return self.model.used_features()

    def to_dict(self):
        return self.model.to_dict()

    @classmethod
    def from_dict(cls, d):
        return cls(DecisionTreeModel.from_dict(d))


class KNNClassifier:
    kind = "k_nearest_neighbors"
    CHUNK = 256

    def __init__(self, X, y, n_classes, n_neighbors, weights):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.intp)
        self.n_classes = n_classes
        self.n_neighbors = n_neighbors
        self.weights = weights

    @classmethod
    def fit(cls, params: dict, ds: Dataset) -> "KNNClassifier":
        return cls(ds.X, ds.y, ds.n_classes, params["n_neighbors"], params["weights"])

    def predict_proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.X.shape[1]:
            raise SchemaMismatchError(f"expected {self.X.shape[1]} features, got {X.shape[1]}")
        k = min(self.n_neighbors, len(self.y))
        sq_train = (self.X ** 2).sum(axis=1)
        out = np.zeros((X.shape[0], self.n_classes))
        for start in range(0, X.shape[0], self.CHUNK):
            Q = X[start:start + self.CHUNK]
            d2 = np.maximum((Q ** 2).sum(axis=1)[:, None] + sq_train[None, :] - 2 * Q @ self.X.T, 0.0)
            # stable sort keeps equal distances in training order
            nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
            labels = self.y[nn]
            if self.weights == "uniform":
                w = np.ones(nn.shape)
            else:
                d = np.sqrt(np.take_along_axis(d2, nn, axis=1))
                exact = d == 0
                w = np.where(exact.any(axis=1, keepdims=True), exact.astype(float), 1.0 / np.where(exact, 1.0, d))
            block = out[start:start + self.CHUNK]
            for c in range(self.n_classes):
                block[:, c] = (w * (labels == c)).sum(axis=1)
        return out / out.sum(axis=1, keepdims=True)

    def used_features(self):
        return np.arange(self.X.shape[1])

    def to_dict(self):
        return {"n_neighbors": self.n_neighbors, "weights": self.weights, "n_classes": self.n_classes,
                "X": self.X.tolist(), "y": self.y.tolist()}

    @classmethod
    def from_dict(cls, d):
        X = np.asarray(d["X"], dtype=np.float64).reshape(len(d["y"]), -1)
        return cls(X, d["y"], d["n_classes"], d["n_neighbors"], d["weights"])


class GaussianNBClassifier:
    kind = "gaussian_naive_bayes"

    def __init__(self, theta, var, log_prior):
        self.theta = np.asarray(theta, dtype=np.float64)
        self.var = np.asarray(var, dtype=np.float64)
        self.log_prior = np.asarray(log_prior, dtype=np.float64)

    @classmethod
    def fit(cls, params: dict, ds: Dataset) -> "GaussianNBClassifier":
        eps = params["var_smoothing"] * max(float(ds.X.var(axis=0).max()), 0.0)
        counts = ds.class_counts()
        theta = np.zeros((ds.n_classes, ds.X.shape[1]))
        var = np.ones_like(theta)
        for c in np.flatnonzero(counts):
            Xc = ds.X[ds.y == c]
            theta[c] = Xc.mean(axis=0)
            var[c] = Xc.var(axis=0)
        var = var + (eps if eps > 0 else np.finfo(float).tiny)
        with np.errstate(divide="ignore"):
            log_prior = np.log(counts / counts.sum())
        return cls(theta, var, log_prior)

    def predict_proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.theta.shape[1]:
            raise SchemaMismatchError(f"expected {self.theta.shape[1]} features, got {X.shape[1]}")
        jll = np.empty((X.shape[0], len(self.log_prior)))
        for c in range(len(self.log_prior)):
            if not np.isfinite(self.log_prior[c]):
                jll[:, c] = -np.inf
                continue
            ll = -0.5 * np.log(2 * np.pi * self.var[c]).sum()
            ll = ll - 0.5 * (((X - self.theta[c]) ** 2) / self.var[c]).sum(axis=1)
            jll[:, c] = self.log_prior[c] + ll
        jll -= jll.max(axis=1, keepdims=True)
        p = np.exp(jll)
        return p / p.sum(axis=1, keepdims=True)

    def used_features(self):
        return np.arange(self.theta.shape[1])

    def to_dict(self):
        return {"theta": self.theta.tolist(), "var": self.var.tolist(),
                "log_prior": [float(v) if np.isfinite(v) else None for v in self.log_prior]}

    @classmethod
    def from_dict(cls, d):
        lp = [-np.inf if v is None else v for v in d["log_prior"]]
        return cls(d["theta"], d["var"], lp)


CLASSIFIERS = {c.kind: c for c in (TreeClassifier, KNNClassifier, GaussianNBClassifier)}


# --------------------------------------------------------------------------- execution


@dataclass(frozen=True, eq=False)
class FittedPipeline:
    genome: PipelineGenome
    preprocessors: tuple
    classifier: object
    input_features: tuple
    input_space: str
    class_names: tuple
    meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return names_fingerprint((*self.input_features, f"@{self.input_space}"))

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(self.input_features):
            raise SchemaMismatchError(f"expected {len(self.input_features)} features, got {X.shape[1]}")
        for p in self.preprocessors:
            X = p.transform(X)
        return X

    def predict_proba(self, X) -> np.ndarray:
        return self.classifier.predict_proba(self.transform(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def check(self, ds: Dataset):
        if ds.fingerprint != self.fingerprint:
            raise SchemaMismatchError(
                f"pipeline expects schema {self.fingerprint}, dataset has {ds.fingerprint}")

    def predict_dataset(self, ds: Dataset) -> np.ndarray:
        self.check(ds)
        return self.predict(ds.X)

    def used_input_features(self) -> np.ndarray:
        """Input columns the classifier can read; the rest never affect predictions."""
        names = np.asarray(self.preprocessors[-1].output_features if self.preprocessors else self.input_features)
        used = set(names[self.classifier.used_features()].tolist())
        return np.array([i for i, f in enumerate(self.input_features) if f in used], dtype=np.intp)

    def final_features(self) -> tuple:
        return tuple(self.preprocessors[-1].output_features) if self.preprocessors else self.input_features


def execute_pipeline(g: PipelineGenome, train: Dataset, space: Optional[OperatorSpace] = None) -> FittedPipeline:
    (space or OperatorSpace()).validate(g)
    if len(train) == 0:
        raise CvInfeasibleError("cannot fit a pipeline on zero rows")
    ds = train
    fitted = []
    for gene in g.preprocessors:
        p = fit_preprocessor(gene.kind, gene.param_dict, ds)
        fitted.append(p)
        ds = apply_preprocessor(p, ds)
    clf = CLASSIFIERS[g.classifier.kind].fit(g.classifier.param_dict, ds)
    return FittedPipeline(g, tuple(fitted), clf, train.features, train.space, train.class_names)


# --------------------------------------------------------------------------- cross-validation


@dataclass(frozen=True)
class CvConfig:
    folds: int = 5
    seed: int = 0
    scoring: str = "accuracy"

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.scoring != "accuracy":
            raise ConfigError("only accuracy scoring is supported")


def row_hashes(ds: Dataset, seed: int) -> np.ndarray:
    """64-bit content hash per row (features and label), salted with the seed."""
    salt = int(seed).to_bytes(16, "little", signed=True)
    data = np.column_stack([ds.X, ds.y.astype(np.float64)])
    return np.array([int.from_bytes(hashlib.blake2b(salt + row.tobytes(), digest_size=8).digest(), "little")
                     for row in data], dtype=np.uint64)


def check_cv_feasible(ds: Dataset, folds: int):
    counts = ds.class_counts()
    present = counts[counts > 0]
    if len(present) < 2:
        raise CvInfeasibleError("stratified cross-validation needs at least two classes")
    if present.min() < folds:
        small = ds.class_names[int(np.flatnonzero(counts == present.min())[0])]
        raise CvInfeasibleError(f"class {small!r} has {present.min()} rows, fewer than {folds} folds")


def fold_assignment(ds: Dataset, cv: CvConfig):
    """(canonical row order, fold id per canonical position).

    Rows are ordered by content hash, so the result does not depend on the
    input row order; within each class the k-th row goes to fold k mod folds.
    """
    check_cv_feasible(ds, cv.folds)
    h = row_hashes(ds, cv.seed)
    order = np.lexsort((h, ds.y))
    y_sorted = ds.y[order]
    folds = np.empty(len(order), dtype=np.intp)
    for c in np.unique(y_sorted):
        pos = np.flatnonzero(y_sorted == c)
        folds[pos] = np.arange(len(pos)) % cv.folds
    # back to a class-interleaved canonical order (by hash) for fitting
    canon = np.argsort(h[order], kind="stable")
    return order[canon], folds[canon]


def cross_val_scores(g: PipelineGenome, ds: Dataset, cv: CvConfig = CvConfig(),
                     space: Optional[OperatorSpace] = None) -> list:
    order, folds = fold_assignment(ds, cv)
    canon = ds.subset(order)
    scores = []
    for k in range(cv.folds):
        test = folds == k
        fp = execute_pipeline(g, canon.subset(np.flatnonzero(~test)), space)
        held = canon.subset(np.flatnonzero(test))
        scores.append(float(np.mean(fp.predict(held.X) == held.y)))
    return scores


def cross_val_score(g: PipelineGenome, ds: Dataset, cv: CvConfig = CvConfig(),
                    space: Optional[OperatorSpace] = None) -> float:
    return float(np.mean(cross_val_scores(g, ds, cv, space)))


def score_genome(g: PipelineGenome, ds: Dataset, cv: CvConfig, space: Optional[OperatorSpace] = None) -> float:
    """Cross-validated accuracy, or -inf when the genome cannot be fitted."""
    try:
        return cross_val_score(g, ds, cv, space)
    except GenomeInfeasibleError:
        return float("-inf")


# --------------------------------------------------------------------------- export


PIPELINE_SCHEMA = {
    "type": "object",
    "required": ["format", "summary", "genome", "input_features", "input_space", "schema_fingerprint",
                 "class_names", "preprocessors", "classifier"],
    "properties": {
        "format": {"const": PIPELINE_FORMAT},
        "summary": {"type": "string"},
        "genome": {
            "type": "array", "minItems": 1,
            "items": {"type": "object", "required": ["kind", "params"],
                      "properties": {"kind": {"type": "string"}, "params": {"type": "object"}}},
        },
        "input_features": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "input_space": {"type": "string"},
        "schema_fingerprint": {"type": "string"},
        "class_names": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "preprocessors": {"type": "array", "maxItems": MAX_PREPROCESSORS,
                          "items": {"type": "object", "required": ["kind", "params", "state"]}},
        "classifier": {
            "type": "object", "required": ["kind", "params", "model"],
            "properties": {"kind": {"enum": sorted(CLASSIFIERS)}, "params": {"type": "object"},
                           "model": {"type": "object"}},
        },
        "meta": {"type": "object"},
    },
}


def pipeline_to_dict(fp: FittedPipeline) -> dict:
    doc = {
        "format": PIPELINE_FORMAT,
        "summary": fp.genome.summary(),
        "genome": fp.genome.to_list(),
        "input_features": list(fp.input_features),
        "input_space": fp.input_space,
        "schema_fingerprint": fp.fingerprint,
        "class_names": list(fp.class_names),
        "preprocessors": [p.to_dict() for p in fp.preprocessors],
        "classifier": {"kind": fp.genome.classifier.kind, "params": fp.genome.classifier.param_dict,
                       "model": fp.classifier.to_dict()},
    }
    if fp.meta:
        doc["meta"] = fp.meta
    return doc


def pipeline_to_json(fp: FittedPipeline) -> str:
    return json.dumps(pipeline_to_dict(fp), indent=1, sort_keys=True) + "\n"


def pipeline_from_dict(doc: dict) -> FittedPipeline:
    if isinstance(doc, dict) and doc.get("format") not in (None, PIPELINE_FORMAT):
        raise PipelineFormatError(f"unsupported pipeline format {doc.get('format')!r} (expected {PIPELINE_FORMAT})")
    try:
        jsonschema.validate(doc, PIPELINE_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "document"
        raise PipelineFormatError(f"invalid pipeline file at {where}: {e.message}") from None
    genome = PipelineGenome.from_list(doc["genome"])
    if genome.classifier.kind != doc["classifier"]["kind"]:
        raise PipelineFormatError("classifier entry disagrees with the genome")
    if len(doc["preprocessors"]) != len(genome.preprocessors):
        raise PipelineFormatError("preprocessor list disagrees with the genome")
    fp = FittedPipeline(
        genome=genome,
        preprocessors=tuple(Preprocessor.from_dict(p) for p in doc["preprocessors"]),
        classifier=CLASSIFIERS[genome.classifier.kind].from_dict(doc["classifier"]["model"]),
        input_features=tuple(doc["input_features"]),
        input_space=doc["input_space"],
        class_names=tuple(doc["class_names"]),
        meta=doc.get("meta", {}),
    )
    if fp.fingerprint != doc["schema_fingerprint"]:
        raise PipelineFormatError("schema fingerprint does not match the listed input features")
    return fp


def export_pipeline(fp: FittedPipeline, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(pipeline_to_json(fp))


def import_pipeline(path) -> FittedPipeline:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise PipelineFormatError(f"{path} is not valid JSON: {e}") from None
    return pipeline_from_dict(doc)
