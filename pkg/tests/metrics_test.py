import json
import logging

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import f1_score, roc_auc_score

from src.errors import DimensionError, MetricUndefinedError
from src.metrics import (
    MetricsReport,
    accuracy,
    auc_macro,
    auc_per_class,
    binarize,
    evaluate_predictions,
    f1_macro,
    f1_per_class,
)


# =============================================================================
# 1) AUC
# =============================================================================
def test_auc_hand_example():
    assert auc_macro([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auc_perfect_and_inverted():
    labels = np.array([0, 0, 1, 1])
    assert auc_macro([0.1, 0.2, 0.8, 0.9], labels) == 1.0
    assert auc_macro([0.9, 0.8, 0.2, 0.1], labels) == 0.0


def test_auc_ties_count_half():
    assert auc_macro([0.5, 0.5], [0, 1]) == 0.5


def test_auc_excludes_single_valued_classes(caplog):
    scores = np.array([[0.1, 0.9], [0.8, 0.2], [0.3, 0.4]])
    labels = np.array([[0, 1], [1, 1], [0, 1]])
    with caplog.at_level(logging.INFO, logger="src.metrics"):
        value = auc_macro(scores, labels, ["NORM", "MI"])
    assert value == 1.0
    assert "MI" in caplog.text
    assert np.isnan(auc_per_class(scores, labels)[1])


def test_auc_undefined_when_no_class_is_valid():
    with pytest.raises(MetricUndefinedError):
        auc_macro(np.ones((3, 2)), np.ones((3, 2)))


def test_auc_agrees_with_sklearn():
    rng = np.random.default_rng(0)
    for _ in range(20):
        labels = (rng.random((40, 5)) < 0.4).astype(int)
        labels[0], labels[1] = 1, 0
        scores = np.round(rng.random((40, 5)), 2)
        expected = roc_auc_score(labels, scores, average="macro")
        assert auc_macro(scores, labels) == pytest.approx(expected, abs=1e-12)


def test_auc_is_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    labels = (rng.random((30, 4)) < 0.5).astype(int)
    labels[0], labels[1] = 1, 0
    scores = rng.standard_normal((30, 4))
    np.testing.assert_array_equal(auc_per_class(scores, labels), auc_per_class(scores ** 3 + scores, labels))


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        auc_macro(np.ones((3, 2)), np.ones((3, 3)))


# =============================================================================
# 2) F1 / accuracy
# =============================================================================
def test_f1_examples():
    labels = np.array([[1, 0], [0, 1], [1, 1]])
    assert f1_macro(labels, labels) == 1.0
    assert f1_macro(np.zeros_like(labels), labels) == 0.0
    # one class with TP=2, FP=1, FN=1
    pred = np.array([1, 1, 1, 0])
    truth = np.array([1, 1, 0, 1])
    assert f1_macro(pred, truth) == pytest.approx(2.0 / 3.0)


def test_f1_zero_over_zero_is_zero():
    np.testing.assert_array_equal(f1_per_class(np.zeros((3, 2)), np.zeros((3, 2))), [0.0, 0.0])


def test_f1_agrees_with_sklearn():
    rng = np.random.default_rng(2)
    for _ in range(20):
        labels = (rng.random((25, 6)) < 0.4).astype(int)
        pred = (rng.random((25, 6)) < 0.4).astype(int)
        expected = f1_score(labels, pred, average="macro", zero_division=0)
        assert f1_macro(pred, labels) == pytest.approx(expected, abs=1e-12)


def test_accuracy_modes():
    labels = np.array([[1, 0], [0, 1]])
    assert accuracy(labels, labels) == 1.0
    assert accuracy(labels, labels, "per_label") == 1.0
    pred = np.array([[1, 0], [1, 1]])
    assert accuracy(pred, labels, "subset") == 0.5
    assert accuracy(pred, labels, "per_label") == 0.75
    assert accuracy(1 - labels, labels) == 0.0
    with pytest.raises(ValueError):
        accuracy(pred, labels, "hamming")


def test_f1_and_accuracy_ignore_sample_order():
    rng = np.random.default_rng(3)
    labels = (rng.random((12, 3)) < 0.5).astype(int)
    pred = (rng.random((12, 3)) < 0.5).astype(int)
    perm = rng.permutation(12)
    assert f1_macro(pred[perm], labels[perm]) == f1_macro(pred, labels)
    assert accuracy(pred[perm], labels[perm]) == accuracy(pred, labels)


def test_binarize_threshold_is_strict():
    np.testing.assert_array_equal(binarize([0.2, 0.5, 0.51]), [0, 0, 1])


# =============================================================================
# 3) Report
# =============================================================================
def test_evaluate_predictions_report(tmp_path):
    logits = np.array([[2.0, -1.0], [-2.0, 1.0], [1.5, 0.5], [-1.0, -3.0]])
    labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    report = evaluate_predictions(logits, labels, ["NORM", "MI"], param_count=10, flop_count=20)
    assert report.auc_macro == 1.0
    assert report.f1_macro == 1.0
    assert report.acc_subset == 1.0
    assert report.n_samples == 4
    assert [c["class"] for c in report.per_class] == ["NORM", "MI"]
    assert report.per_class[1]["support"] == 2

    report.write_json(str(tmp_path / "metrics.json"))
    text = (tmp_path / "metrics.json").read_text(encoding="utf-8")
    assert json.loads(text)["param_count"] == 10
    assert text.index('"acc_per_label"') < text.index('"auc_macro"')

    report.write_csv(str(tmp_path / "metrics.csv"))
    row = pd.read_csv(tmp_path / "metrics.csv")
    assert len(row) == 1
    assert row.loc[0, "f1_MI"] == 1.0


def test_report_auc_is_null_when_undefined():
    report = evaluate_predictions(np.zeros((2, 1)), np.ones((2, 1)), ["NORM"])
    assert report.auc_macro is None
    assert report.per_class[0]["auc"] is None
    assert isinstance(report, MetricsReport)
