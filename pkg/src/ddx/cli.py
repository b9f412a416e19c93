"""Command line entry point: gen, extract, train, evolve, explain, eval, predict.

Each subcommand writes fixed file names into its ``--output`` directory.
JSON artifacts embed a ``meta`` block; every directory also gets a
``run.json`` holding the same block plus digests of all files written.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 infeasible configuration. Failures print exactly one line to stderr,
``ddx: error[<kind>]: <message>``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import secrets
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cart import TreeHyperparams, ranked_importances
from .dataset import (
    Dataset,
    clean,
    encode_labels,
    load_flows_csv,
    read_features_csv,
    read_label_mapping,
    stratified_split_indices,
    write_dataset_csv,
    write_label_mapping,
    write_split_manifest,
)
from .errors import ConfigError, DataError, InfeasibleError
from .evolve import EvolveConfig, evolve, write_evolve_report
from .flowmeter import FlowAssemblyConfig, assemble_flows, compute_features, read_packets_jsonl, write_flows_csv, write_packets_jsonl
from .metrics import confusion_matrix, pr_curve, write_metrics_json, write_pr_csv
from .pipeline import (
    CvConfig,
    Gene,
    OperatorSpace,
    PipelineGenome,
    cross_val_score,
    execute_pipeline,
    export_pipeline,
    import_pipeline,
    load_operator_space,
)
from .shapley import (
    exact_shapley,
    model_value_fn,
    sample_background,
    sampled_shapley,
    shap_summary,
    write_explanations_json,
    write_summary_csv,
)
from .trafficgen import synthetic_packets

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------- helpers


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Collects the resolved config, input digests and written outputs of one invocation."""

    def __init__(self, args, inputs):
        self.config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
        self.inputs = {str(p): file_digest(p) for p in inputs if p is not None}
        self.out = Path(args.output)
        self.out.mkdir(parents=True, exist_ok=True)
        self.written = []

    @property
    def meta(self) -> dict:
        return {"tool_version": __version__, "config": self.config, "input_digests": self.inputs}

    def path(self, name) -> Path:
        self.written.append(name)
        return self.out / name

    def finish(self, extra=None):
        doc = {"meta": self.meta, "outputs": {n: file_digest(self.out / n) for n in self.written}}
        if extra:
            doc.update(extra)
        (self.out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _mapping(args):
    return read_label_mapping(args.labels) if args.labels else None


def _load_labeled(path, args, class_names=None):
    mapping = {n: i for i, n in enumerate(class_names)} if class_names else _mapping(args)
    ds, dropped = clean(load_flows_csv(path, mapping=mapping))
    return ds, dropped


def _load_for_model(path, fp, require_label):
    """Rows in the model's input feature order; labels encoded with the model's classes."""
    names, X, labels = read_features_csv(path, fp.input_features, require_label=require_label)
    keep = np.isfinite(X).all(axis=1)
    if labels is None:
        return names, X, None, keep
    _, y = encode_labels(labels, {n: i for i, n in enumerate(fp.class_names)})
    return names, X, y, keep


def _split(ds, args):
    train_idx, test_idx = stratified_split_indices(ds.y, ds.n_classes, args.test_fraction, args.seed)
    return train_idx, test_idx, ds.subset(train_idx), ds.subset(test_idx)


def _write_importances(run, fp):
    if fp.genome.classifier.kind != "decision_tree":
        return None
    rows = ranked_importances(fp.classifier.model, fp.final_features())
    with open(run.path("importances.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "importance"])
        for rank, name, value in rows:
            w.writerow([rank, name, repr(value)])
    return rows


def _with_meta(fp, run):
    object.__setattr__(fp, "meta", run.meta)
    return fp


# --------------------------------------------------------------------------- subcommands


def cmd_gen(args):
    run = Run(args, [])
    packets = synthetic_packets(args.flows, args.flows, args.seed)
    with open(run.path("packets.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        n = write_packets_jsonl(packets, fh)
    write_label_mapping(run.path("labels.txt"), ("benign", "dos_slowloris"))
    run.finish({"packets": n})


def cmd_extract(args):
    run = Run(args, [args.input])
    with open(args.input, encoding="utf-8") as fh:
        flows = assemble_flows(read_packets_jsonl(fh), FlowAssemblyConfig())
    with open(run.path("flows.csv"), "w", encoding="utf-8", newline="") as fh:
        n = write_flows_csv((compute_features(f) for f in flows), fh)
    run.finish({"flows": n})


def _train_common(args, run, fit):
    ds, dropped = _load_labeled(args.input, args)
    train_idx, test_idx, train, test = _split(ds, args)
    write_split_manifest(run.path("split.json"), train_idx, test_idx, args.test_fraction, args.seed)
    write_dataset_csv(test, run.path("test.csv"))
    fp, extra = fit(train)
    export_pipeline(_with_meta(fp, run), run.path("pipeline.json"))
    rows = _write_importances(run, fp)
    test_acc = float(np.mean(fp.predict(test.X) == test.y)) if len(test) else None
    extra.update({"dropped_rows": dropped, "train_rows": len(train), "test_rows": len(test),
                  "test_accuracy": test_acc, "pipeline": fp.genome.summary(),
                  "importances": None if rows is None else [{"rank": r, "feature": f, "importance": v}
                                                            for r, f, v in rows]})
    run.finish(extra)


def cmd_train(args):
    run = Run(args, [args.input, args.labels])
    depth = None if args.max_depth == 0 else args.max_depth
    TreeHyperparams(args.criterion, depth or 50, args.min_samples_leaf, args.min_samples_split)
    gene = Gene.make("decision_tree", criterion=args.criterion, max_depth=depth,
                     min_samples_leaf=args.min_samples_leaf, min_samples_split=args.min_samples_split)
    genome = PipelineGenome((gene,))
    # the fixed genome may use values outside the search grid
    space = OperatorSpace(classifiers={"decision_tree": {k: [v] for k, v in gene.params}})

    def fit(train):
        fp = execute_pipeline(genome, train, space)
        extra = {}
        if args.folds:
            extra["cv_accuracy"] = cross_val_score(genome, train, CvConfig(args.folds, args.seed), space)
        return fp, extra

    _train_common(args, run, fit)


def cmd_evolve(args):
    run = Run(args, [args.input, args.labels, args.grid])
    space = load_operator_space(args.grid) if args.grid else OperatorSpace()
    cfg = EvolveConfig(generations=args.generations, population=args.population, folds=args.folds,
                       seed=args.seed, threads=args.threads, space=space)

    def fit(train):
        fp, report = evolve(train, cfg)
        write_evolve_report(run.path("evolve_report.json"), report, run.meta)
        return fp, {"best_cv_accuracy": report.best_score, "evaluations": report.evaluations}

    _train_common(args, run, fit)


def cmd_explain(args):
    run = Run(args, [args.model, args.input, args.reference])
    fp = import_pipeline(args.model)
    _, X, y, keep = _load_for_model(args.input, fp, require_label=False)
    ref_path = args.reference or args.input
    _, R, _, rkeep = _load_for_model(ref_path, fp, require_label=False)
    ref = Dataset(fp.input_features, R[rkeep], np.zeros(int(rkeep.sum()), dtype=np.intp), fp.class_names)
    if len(ref) == 0:
        raise DataError(f"{ref_path}: no usable background rows")
    background = sample_background(ref, args.background, args.seed)
    rows = np.flatnonzero(keep)
    if args.max_instances:
        rows = rows[:args.max_instances]
    predicted = fp.predict(X[rows]) if len(rows) else np.zeros(0, dtype=np.intp)
    explanations = []
    for row, pred in zip(rows, predicted):
        classes = range(len(fp.class_names)) if args.explain_classes == "all" else [int(pred)]
        for cls in classes:
            v = model_value_fn(fp, X[row], background, cls)
            if args.permutations:
                e = sampled_shapley(v, args.permutations, args.seed, instance_id=int(row))
            else:
                e = exact_shapley(v, args.exact_limit, instance_id=int(row))
            explanations.append(e)
    if not explanations:
        raise DataError(f"{args.input}: no rows to explain")
    write_explanations_json(run.path("explanations.json"), explanations, fp.class_names, run.meta)
    write_summary_csv(run.path("shap_summary.csv"), shap_summary(explanations, fp.class_names))
    run.finish({"explained_rows": len(rows), "skipped_rows": int((~keep).sum())})


def cmd_eval(args):
    run = Run(args, [args.model, args.input])
    fp = import_pipeline(args.model)
    _, X, y, keep = _load_for_model(args.input, fp, require_label=True)
    X, y = X[keep], y[keep]
    if len(y) == 0:
        raise DataError(f"{args.input}: no usable rows")
    proba = fp.predict_proba(X)
    cm = confusion_matrix(y, np.argmax(proba, axis=1), len(fp.class_names), fp.class_names)
    write_metrics_json(run.path("metrics.json"), cm, run.meta)
    write_pr_csv(run.path("pr.csv"), {name: pr_curve(y == c, proba[:, c]) for c, name in enumerate(fp.class_names)})
    run.finish({"accuracy": cm.accuracy(), "skipped_rows": int((~keep).sum())})


def cmd_predict(args):
    run = Run(args, [args.model, args.input])
    fp = import_pipeline(args.model)
    _, X, _, keep = _load_for_model(args.input, fp, require_label=False)
    rows = np.flatnonzero(keep)
    proba = fp.predict_proba(X[rows]) if len(rows) else np.zeros((0, len(fp.class_names)))
    with open(run.path("predictions.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "predicted_label", *(f"p_{n}" for n in fp.class_names)])
        for r, p in zip(rows, proba):
            w.writerow([int(r) + 1, fp.class_names[int(np.argmax(p))], *(repr(float(v)) for v in p)])
    run.finish({"predicted_rows": len(rows), "skipped_rows": int((~keep).sum())})


# --------------------------------------------------------------------------- parser


def _positive(kind):
    def conv(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return conv


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ddx", description="Explainable DoS detection: flows, pipeline search, Shapley attributions.")
    p.add_argument("--version", action="version", version=f"ddx {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_input=True, seed_help="random seed (a recorded random seed is drawn when absent)"):
        if needs_input:
            sp.add_argument("--input", required=True, help="input file")
        sp.add_argument("--output", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help=seed_help)
        sp.add_argument("--config", help="key=value file; command line flags override it")
        sp.add_argument("--threads", type=_positive(int), default=os.cpu_count() or 1, help="worker cap")

    def training(sp):
        sp.add_argument("--labels", help="label mapping file (name=id lines)")
        sp.add_argument("--test-fraction", type=float, default=0.3)
        sp.add_argument("--folds", type=_nonneg_int, default=5)

    sp = sub.add_parser("gen", help="generate a synthetic benign/DoS packet stream")
    common(sp, needs_input=False)
    sp.add_argument("--flows", type=_positive(int), default=500, help="flows per class")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("extract", help="packet JSONL -> flow feature CSV")
    common(sp)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train", help="fit a fixed decision-tree pipeline")
    common(sp)
    training(sp)
    sp.add_argument("--criterion", choices=("entropy", "gini"), default="entropy")
    sp.add_argument("--max-depth", type=_nonneg_int, default=10, help="0 = unlimited")
    sp.add_argument("--min-samples-leaf", type=_positive(int), default=2)
    sp.add_argument("--min-samples-split", type=_positive(int), default=7)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evolve", help="search preprocessing + classifier pipelines")
    common(sp)
    training(sp)
    sp.add_argument("--generations", type=_nonneg_int, default=2)
    sp.add_argument("--population", type=_positive(int), default=30)
    sp.add_argument("--grid", help="JSON operator grid overriding the default search space")
    sp.set_defaults(func=cmd_evolve)

    sp = sub.add_parser("explain", help="Shapley attributions for rows of a flow CSV")
    common(sp)
    sp.add_argument("--model", required=True, help="pipeline JSON")
    sp.add_argument("--reference", help="CSV to draw background rows from (default: --input)")
    sp.add_argument("--background", type=_positive(int), default=100)
    sp.add_argument("--permutations", type=_nonneg_int, default=0, help="0 = exact enumeration")
    sp.add_argument("--exact-limit", type=_positive(int), default=16)
    sp.add_argument("--explain-classes", choices=("predicted", "all"), default="predicted")
    sp.add_argument("--max-instances", type=_nonneg_int, default=0, help="0 = all rows")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("eval", help="confusion matrix, rates and PR curves")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="predicted labels and class probabilities")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_predict)
    return p


def read_config_file(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in read_config_file(args.config).items():
            if key not in actions or key in ("config", "help"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            a = actions[key]
            try:
                value = a.type(raw) if a.type else raw
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise UsageError(f"config key {key}: {e}") from None
            if a.choices is not None and value not in a.choices:
                raise UsageError(f"config key {key}: {value!r} not in {sorted(a.choices)}")
            defaults[key] = value
        sub.set_defaults(**defaults)
        for a in sub._actions:
            if a.dest in defaults:
                a.required = False
        args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = secrets.randbits(32)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        args.func(args)
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)
    except ConfigError as e:
        return _fail("config", e, EXIT_USAGE)
    except InfeasibleError as e:
        return _fail("infeasible", e, EXIT_INFEASIBLE)
    except DataError as e:
        return _fail("data", e, EXIT_DATA)
    except (OSError, UnicodeDecodeError) as e:
        return _fail("data", e, EXIT_DATA)
    return EXIT_OK


def _fail(kind, exc, code) -> int:
    msg = " ".join(str(exc).split())
    print(f"ddx: error[{kind}]: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
