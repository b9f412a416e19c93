import csv
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddx.errors import DataError
from ddx.metrics import (
    ConfusionMatrix,
    accuracy,
    class_rates,
    confusion_matrix,
    pr_curve,
    write_metrics_json,
    write_pr_csv,
)

CLASSES = ("benign", "bot", "dos_slowloris", "ftp_patator", "webattack_bruteforce", "webattack_xss")
REFERENCE_CM = [
    [194089, 1, 7, 9, 9, 4],
    [4, 39, 0, 0, 0, 0],
    [36, 0, 2397, 0, 0, 0],
    [0, 0, 0, 1335, 0, 0],
    [11, 0, 2, 0, 917, 117],
    [0, 0, 0, 0, 0, 0],
]


def test_perfect_predictions_diagonal():
    cm = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert cm.to_list() == [[1, 0, 0], [0, 1, 0], [0, 0, 2]]
    assert all(r.fpr == 0 and r.fnr == 0 for r in class_rates(cm))


def test_single_sample():
    cm = confusion_matrix([1], [1], 2)
    assert cm.total == 1 and cm.counts[1, 1] == 1 and accuracy(cm) == 1.0


def test_reference_cm_accuracy():
    cm = ConfusionMatrix(np.array(REFERENCE_CM), CLASSES)
    assert abs(accuracy(cm) - 198777 / 198977) <= 1e-12


def test_reference_cm_benign_one_vs_rest_fpr():
    benign = class_rates(ConfusionMatrix(np.array(REFERENCE_CM), CLASSES))[0]
    assert benign.fp == 51
    assert benign.fp + benign.tn == 4858
    assert benign.fpr == 51 / 4858


def test_reference_cm_empty_class_rates_are_zero():
    xss = class_rates(ConfusionMatrix(np.array(REFERENCE_CM), CLASSES))[5]
    assert xss.support == 0 and xss.fnr == 0.0 and xss.recall == 0.0
    assert xss.fp == 121 and xss.precision == 0.0


def test_binary_rates():
    r0 = class_rates(ConfusionMatrix(np.array([[8, 2], [1, 9]]), ("a", "b")))[0]
    assert Fraction(r0.fpr).limit_denominator(100) == Fraction(1, 10)
    assert Fraction(r0.fnr).limit_denominator(100) == Fraction(2, 10)


def test_range_and_length_errors():
    with pytest.raises(DataError):
        confusion_matrix([0, 3], [0, 1], 3)
    with pytest.raises(DataError):
        confusion_matrix([0, 1], [0], 2)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 5).flatmap(lambda k: st.tuples(
    st.just(k), st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=60))))
def test_count_identities(case):
    k, pairs = case
    t, p = zip(*pairs)
    cm = confusion_matrix(t, p, k)
    for i, r in enumerate(class_rates(cm)):
        assert r.tp + r.fn == cm.counts[i].sum()
        assert r.tp + r.fp == cm.counts[:, i].sum()
        assert r.tp + r.fp + r.fn + r.tn == cm.total
        if r.support:
            assert abs(r.fnr - (1 - r.recall)) <= 1e-15
    perm = np.random.default_rng(k).permutation(k)
    inv = np.argsort(perm)
    shuffled = confusion_matrix(inv[list(t)], inv[list(p)], k)
    assert accuracy(shuffled) == accuracy(cm)


def test_pr_hand_sweep():
    curve = pr_curve([1, 1, 0, 0], [0.9, 0.8, 0.3, 0.1])
    pts = curve.recall_precision()
    assert pts[0] == (0.0, 1.0)
    assert (0.5, 1.0) in pts and (1.0, 1.0) in pts
    assert pts[-1] == (1.0, 0.5)


def test_pr_separating_scores_reach_corner():
    assert (1.0, 1.0) in pr_curve([0, 1, 0, 1], [0.1, 0.7, 0.2, 0.9]).recall_precision()


def test_pr_no_positives():
    curve = pr_curve([0, 0, 0], [0.2, 0.5, 0.1])
    assert curve.no_positives and curve.points == ()


def test_pr_tied_scores_form_one_point():
    curve = pr_curve([1, 0, 1], [0.5, 0.5, 0.5])
    assert len(curve.points) == 2
    assert curve.points[1][1:] == (1.0, 2 / 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.floats(0, 1)), min_size=1, max_size=50))
def test_pr_recall_monotone(rows):
    y, s = zip(*rows)
    curve = pr_curve(y, s)
    thresholds = [t for t, _, _ in curve.points]
    recalls = [r for _, r, _ in curve.points]
    assert thresholds == sorted(thresholds, reverse=True)
    assert recalls == sorted(recalls)


def test_pr_rejects_nan():
    with pytest.raises(DataError):
        pr_curve([1, 0], [0.5, np.nan])


def test_report_files(tmp_path):
    cm = ConfusionMatrix(np.array([[8, 2], [1, 9]]), ("benign", "dos"))
    write_metrics_json(tmp_path / "m.json", cm, meta={"tool_version": "x"})
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["confusion_matrix"] == [[8, 2], [1, 9]]
    assert doc["accuracy"] == 17 / 20
    assert doc["per_class_rates"]["benign"]["fpr"] == 0.1
    write_pr_csv(tmp_path / "pr.csv", {"dos": pr_curve([0, 1], [0.2, 0.9]), "x": pr_curve([0], [0.1])})
    rows = list(csv.reader((tmp_path / "pr.csv").open()))
    assert rows[0] == ["class", "threshold", "precision", "recall"]
    assert rows[-1] == ["x", "no_positives", "", ""]
