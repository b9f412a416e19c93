import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddx.dataset import (
    Dataset,
    apply_preprocessor,
    clean,
    f_scores,
    fit_preprocessor,
    load_flows_csv,
    read_label_mapping,
    stratified_split,
    stratified_split_indices,
    write_dataset_csv,
    write_label_mapping,
    write_split_manifest,
)
from ddx.errors import (
    CsvParseError,
    DataError,
    EmptyDatasetError,
    GenomeInfeasibleError,
    MissingColumnError,
    SchemaMismatchError,
    UnknownLabelError,
)
from ddx.flowmeter import feature_schema

NAMES = feature_schema().names
CLASS_IDS = {"benign": 0, "bot": 1, "dos_slowloris": 2, "ftp_patator": 3, "webattack_bruteforce": 4, "webattack_xss": 5}


def small(X, y, names=None, classes=("a", "b")):
    X = np.asarray(X, dtype=float)
    names = names or tuple(f"f{i}" for i in range(X.shape[1]))
    return Dataset(names, X, np.asarray(y), classes)


def write_csv(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")


# ---------------------------------------------------------------- loading


def test_permuted_columns_restored(tmp_path):
    header = list(reversed(NAMES)) + ["label"]
    rows = [[*[str(i) for i in reversed(range(len(NAMES)))], "benign"]]
    write_csv(tmp_path / "f.csv", header, rows)
    ds = load_flows_csv(tmp_path / "f.csv")
    assert ds.features == NAMES
    assert ds.X[0].tolist() == list(range(len(NAMES)))


def test_unparseable_cell_reports_row_and_column(tmp_path):
    rows = [[*["1"] * len(NAMES), "benign"] for _ in range(10)]
    rows[6][NAMES.index("flow_duration")] = "abc"
    write_csv(tmp_path / "f.csv", [*NAMES, "label"], rows)
    with pytest.raises(CsvParseError) as exc:
        load_flows_csv(tmp_path / "f.csv")
    assert exc.value.row == 7 and exc.value.column == "flow_duration"
    assert "row 7" in str(exc.value) and "flow_duration" in str(exc.value)


def test_missing_label_column(tmp_path):
    write_csv(tmp_path / "f.csv", NAMES, [["1"] * len(NAMES)])
    with pytest.raises(MissingColumnError) as exc:
        load_flows_csv(tmp_path / "f.csv")
    assert exc.value.column == "label"


def test_missing_feature_column(tmp_path):
    write_csv(tmp_path / "f.csv", [*NAMES[1:], "label"], [[*["1"] * (len(NAMES) - 1), "x"]])
    with pytest.raises(MissingColumnError, match=NAMES[0]):
        load_flows_csv(tmp_path / "f.csv")


def test_class_mapping_ordering(tmp_path):
    labels = ["webattack_xss", "benign", "bot", "ftp_patator", "dos_slowloris", "webattack_bruteforce"]
    write_csv(tmp_path / "f.csv", ["a", "label"], [[i, lab] for i, lab in enumerate(labels)])
    write_label_mapping(tmp_path / "labels.txt", list(CLASS_IDS))
    mapping = read_label_mapping(tmp_path / "labels.txt")
    assert mapping == CLASS_IDS
    ds = load_flows_csv(tmp_path / "f.csv", expected=["a"], mapping=mapping)
    assert ds.class_names == tuple(CLASS_IDS)
    assert ds.y.tolist() == [5, 0, 1, 3, 2, 4]


def test_first_seen_order_without_mapping(tmp_path):
    write_csv(tmp_path / "f.csv", ["a", "label"], [[1, "dos"], [2, "benign"], [3, "dos"]])
    ds = load_flows_csv(tmp_path / "f.csv", expected=["a"])
    assert ds.class_names == ("dos", "benign") and ds.y.tolist() == [0, 1, 0]


def test_unknown_label_with_mapping(tmp_path):
    write_csv(tmp_path / "f.csv", ["a", "label"], [[1, "mystery"]])
    with pytest.raises(UnknownLabelError):
        load_flows_csv(tmp_path / "f.csv", expected=["a"], mapping={"benign": 0})


def test_bad_mapping_ids(tmp_path):
    (tmp_path / "m.txt").write_text("a=0\nb=2\n")
    with pytest.raises(DataError):
        read_label_mapping(tmp_path / "m.txt")


def test_csv_round_trip(tmp_path):
    ds = small([[1.5, 2], [3, 4.25]], [0, 1])
    write_dataset_csv(ds, tmp_path / "d.csv")
    back = load_flows_csv(tmp_path / "d.csv", expected=ds.features, mapping={"a": 0, "b": 1})
    assert np.array_equal(back.X, ds.X) and back.y.tolist() == [0, 1]


# ---------------------------------------------------------------- clean


def test_clean_drops_nan_row():
    X = np.arange(20.0).reshape(10, 2)
    X[3, 1] = np.nan
    out, dropped = clean(small(X, [0, 1] * 5))
    assert dropped == 1 and len(out) == 9


def test_clean_identity():
    ds = small(np.ones((4, 2)), [0, 1, 0, 1])
    out, dropped = clean(ds)
    assert dropped == 0 and out is ds


def test_clean_all_invalid():
    with pytest.raises(EmptyDatasetError):
        clean(small([[np.inf, 1], [np.nan, 2]], [0, 1]))


# ---------------------------------------------------------------- split


def test_split_per_class_rounding():
    y = np.array([0] * 90 + [1] * 10)
    train, test = stratified_split(small(np.arange(100.0)[:, None], y), 0.3, seed=1)
    assert test.class_counts().tolist() == [27, 3]
    assert train.class_counts().tolist() == [63, 7]


def test_split_deterministic_and_disjoint():
    y = np.array([0] * 50 + [1] * 30 + [2] * 7)
    a = stratified_split_indices(y, 3, 0.25, seed=42)
    b = stratified_split_indices(y, 3, 0.25, seed=42)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert not set(a[0]) & set(a[1])
    assert sorted([*a[0], *a[1]]) == list(range(len(y)))


def test_singleton_class_stays_in_train():
    y = np.array([0] * 10 + [1])
    train, test = stratified_split_indices(y, 2, 0.5, seed=0)
    assert 10 in train and 10 not in test


def test_small_class_gets_one_test_row():
    y = np.array([0] * 10 + [1, 1])
    _, test = stratified_split_indices(y, 2, 0.1, seed=0)
    assert (y[test] == 1).sum() == 1


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
def test_split_fraction_range(frac):
    with pytest.raises(DataError):
        stratified_split_indices(np.array([0, 1]), 2, frac, seed=0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=80), st.floats(0.05, 0.95), st.integers(0, 2**32))
def test_split_preserves_row_multiset(labels, frac, seed):
    y = np.array(labels)
    X = np.arange(len(y), dtype=float)[:, None] % 7
    ds = Dataset(("x",), X, y, ("a", "b", "c", "d"))
    train, test = stratified_split(ds, frac, seed)
    rows = sorted(map(tuple, np.column_stack([ds.X, ds.y]).tolist()))
    got = sorted(map(tuple, np.column_stack([np.vstack([train.X, test.X]), np.concatenate([train.y, test.y])]).tolist()))
    assert rows == got


def test_split_manifest(tmp_path):
    write_split_manifest(tmp_path / "s.json", [0, 2], [1], 0.3, 5)
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc == {"seed": 5, "test_fraction": 0.3, "train": [0, 2], "test": [1]}


# ---------------------------------------------------------------- preprocessors


def test_min_max_column():
    ds = small([[2.0], [4.0], [6.0]], [0, 1, 0])
    out = apply_preprocessor(fit_preprocessor("min_max_scaler", {}, ds), ds)
    assert out.X[:, 0].tolist() == [0.0, 0.5, 1.0]


def test_constant_feature_scales_to_zero():
    ds = small([[5.0, 1], [5.0, 2], [5.0, 3]], [0, 1, 0])
    for kind in ("min_max_scaler", "standard_scaler"):
        out = apply_preprocessor(fit_preprocessor(kind, {}, ds), ds)
        assert out.X[:, 0].tolist() == [0.0, 0.0, 0.0]


def test_standard_scaler_moments():
    X = np.random.default_rng(0).normal(3, 2, size=(50, 3))
    ds = small(X, [0, 1] * 25)
    out = apply_preprocessor(fit_preprocessor("standard_scaler", {}, ds), ds)
    assert np.allclose(out.X.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(out.X.std(axis=0), 1, atol=1e-12)


def test_variance_threshold_drops_constant():
    ds = small([[1.0, 1], [1.0, 2], [1.0, 3]], [0, 1, 0])
    p = fit_preprocessor("variance_threshold", {"threshold": 0.0}, ds)
    out = apply_preprocessor(p, ds)
    assert out.features == ("f1",)


def test_variance_threshold_dropping_everything_is_infeasible():
    ds = small([[1.0, 1], [1.0, 1]], [0, 1])
    with pytest.raises(GenomeInfeasibleError):
        fit_preprocessor("variance_threshold", {"threshold": 0.0}, ds)


def test_select_k_best_keeps_label_feature():
    rng = np.random.default_rng(17)
    y = rng.integers(0, 2, 60)
    X = np.column_stack([y.astype(float), rng.normal(size=60)])
    ds = small(X, y)
    out = apply_preprocessor(fit_preprocessor("select_k_best", {"k": 1}, ds), ds)
    assert out.features == ("f0",)


def test_select_k_best_too_many():
    ds = small([[1.0, 2], [2.0, 1]], [0, 1])
    with pytest.raises(GenomeInfeasibleError):
        fit_preprocessor("select_k_best", {"k": 3}, ds)


def test_f_scores_against_direct_anova():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 3, 40)
    x = rng.normal(size=40) + y
    groups = [x[y == c] for c in range(3)]
    grand = x.mean()
    ssb = sum(len(g) * (g.mean() - grand) ** 2 for g in groups)
    ssw = sum(((g - g.mean()) ** 2).sum() for g in groups)
    expected = (ssb / 2) / (ssw / (40 - 3))
    assert np.isclose(f_scores(x[:, None], y, 3)[0], expected, rtol=1e-12)


def test_apply_to_mismatched_schema():
    ds = small([[1.0, 2], [2.0, 1]], [0, 1])
    other = small([[1.0, 2], [2.0, 1]], [0, 1], names=("x", "y"))
    with pytest.raises(SchemaMismatchError):
        apply_preprocessor(fit_preprocessor("min_max_scaler", {}, ds), other)


def test_apply_never_refits_and_keeps_labels():
    rng = np.random.default_rng(1)
    train = small(rng.normal(5, 3, (30, 2)), [0, 1] * 15)
    p = fit_preprocessor("standard_scaler", {}, train)
    once = apply_preprocessor(p, train)
    assert np.array_equal(once.y, train.y) and len(once) == len(train)
    # re-applying the train-fitted scaler to its own output shifts values again
    relabeled = Dataset(once.features, once.X, once.y, once.class_names, train.space)
    twice = apply_preprocessor(p, relabeled)
    assert not np.allclose(twice.X, once.X)


def test_selector_only_drops_columns():
    rng = np.random.default_rng(2)
    train = small(rng.normal(size=(30, 4)), [0, 1] * 15)
    out = apply_preprocessor(fit_preprocessor("select_k_best", {"k": 2}, train), train)
    cols = [train.features.index(f) for f in out.features]
    assert np.array_equal(out.X, train.X[:, cols])
