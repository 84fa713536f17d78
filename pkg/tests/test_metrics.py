import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import count_confusion, count_rates
from floodbench.errors import ContractError, ShapeError
from floodbench.metrics import (TABLE_COLUMNS, ConfusionMatrix, binary_collapse, block_sum, compute_metrics,
                                confusion, evaluate_maps, normalize_rows, rows_to_csv, table_row)

label_maps = arrays(np.int64, (6, 7), elements=st.integers(0, 3))


def binary_cm(tp, fp, fn, tn):
    # class 0 is no-damage, class 1 is the positive (damaged) class
    return ConfusionMatrix(np.array([[tn, fp], [fn, tp]]))


# confusion

def test_confusion_diagonal_when_equal(rng):
    labels = rng.integers(0, 4, (3, 8, 8))
    cm = confusion(labels, labels)
    assert (cm.counts == np.diag(np.diag(cm.counts))).all()
    assert cm.total == labels.size


def test_confusion_single_pixel():
    cm = confusion(np.array([[2]]), np.array([[0]]))
    expect = np.zeros((4, 4), dtype=np.int64)
    expect[2, 0] = 1
    np.testing.assert_array_equal(cm.counts, expect)


def test_confusion_matches_counting_oracle(rng):
    labels, preds = rng.integers(0, 4, (64, 64)), rng.integers(0, 4, (64, 64))
    np.testing.assert_array_equal(confusion(labels, preds).counts, count_confusion(labels, preds, 4))


def test_confusion_errors():
    with pytest.raises(ShapeError):
        confusion(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ContractError):
        confusion(np.array([4]), np.array([0]))


def test_confusion_shards_merge(rng):
    labels, preds = rng.integers(0, 4, (4, 8, 8)), rng.integers(0, 4, (4, 8, 8))
    parts = [confusion(labels[i], preds[i]) for i in range(4)]
    merged = parts[3] + parts[1] + parts[0] + parts[2]
    np.testing.assert_array_equal(merged.counts, confusion(labels, preds).counts)


# binary collapse

def test_binary_collapse_values():
    np.testing.assert_array_equal(binary_collapse(np.array([0, 1, 2, 3])), [0, 1, 1, 1])
    np.testing.assert_array_equal(binary_collapse(np.zeros((3, 3), int)), np.zeros((3, 3)))
    with pytest.raises(ContractError):
        binary_collapse(np.array([5]))


@given(label_maps, label_maps)
def test_block_sum_identity(g, p):
    direct = confusion(binary_collapse(g), binary_collapse(p), 2)
    np.testing.assert_array_equal(direct.counts, block_sum(confusion(g, p)).counts)
    a = compute_metrics(direct)
    b = compute_metrics(block_sum(confusion(g, p)))
    assert a.to_dict() == b.to_dict()


# compute_metrics

def test_perfect_matrix():
    rep = compute_metrics(ConfusionMatrix(np.diag([5, 3, 2, 7])))
    assert rep.oa == 1.0 and rep.kappa == 1.0 and rep.macro_f1 == 1.0


def test_binary_hand_case():
    rep = compute_metrics(binary_cm(tp=2, fp=1, fn=1, tn=6))
    assert rep.precision[1] == pytest.approx(2 / 3, abs=1e-12)
    assert rep.recall[1] == pytest.approx(2 / 3, abs=1e-12)
    assert rep.f1[1] == pytest.approx(2 / 3, abs=1e-12)
    assert rep.oa == pytest.approx(0.8, abs=1e-12)
    assert rep.kappa == pytest.approx(0.523810, abs=1e-6)
    assert rep.kappa == pytest.approx(0.22 / 0.42, abs=1e-12)


def test_binary_kappa_matches_two_class_formula(rng):
    tp, fp, fn, tn = (int(v) for v in rng.integers(1, 50, 4))
    n = tp + fp + fn + tn
    p_o = (tp + tn) / n
    p_e = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / n**2
    assert compute_metrics(binary_cm(tp, fp, fn, tn)).kappa == pytest.approx((p_o - p_e) / (1 - p_e), abs=1e-12)


def test_chance_kappa_near_zero():
    rng = np.random.default_rng(7)
    labels = np.repeat(np.arange(4), 25_000)
    preds = rng.integers(0, 4, labels.size)
    assert abs(compute_metrics(confusion(labels, preds)).kappa) < 0.05


def test_empty_matrix_is_contract_error():
    with pytest.raises(ContractError):
        compute_metrics(ConfusionMatrix(np.zeros((4, 4), dtype=np.int64)))


def test_absent_class_is_flagged():
    labels = np.array([0, 0, 1, 1])
    preds = np.array([0, 1, 1, 1])
    rep = compute_metrics(confusion(labels, preds))
    assert list(rep.undefined["recall"]) == [2, 3]
    assert list(rep.undefined["precision"]) == [2, 3]
    assert rep.recall[2] == 0.0 and rep.f1[3] == 0.0


def test_degenerate_chance_agreement():
    rep = compute_metrics(ConfusionMatrix(np.diag([9, 0, 0, 0])))
    assert rep.kappa == 1.0 and "kappa" in rep.undefined


@given(label_maps, label_maps)
def test_metrics_match_counting_oracle(g, p):
    rep = compute_metrics(confusion(g, p))
    ref = count_rates(g, p, 4)
    for key in ("precision", "recall", "f1"):
        np.testing.assert_allclose(getattr(rep, key), ref[key], atol=1e-12, rtol=0)
    for key in ("oa", "kappa", "macro_f1"):
        assert getattr(rep, key) == pytest.approx(ref[key], abs=1e-12)


@given(label_maps, label_maps)
def test_rate_ranges(g, p):
    rep = compute_metrics(confusion(g, p))
    for arr in (rep.precision, rep.recall, rep.f1):
        assert ((arr >= 0) & (arr <= 1)).all()
    assert -1 <= rep.kappa <= 1 and 0 <= rep.oa <= 1


@given(label_maps, label_maps, st.permutations(range(4)))
def test_permutation_invariance(g, p, perm):
    perm = np.array(perm)
    base = compute_metrics(confusion(g, p))
    moved = compute_metrics(confusion(perm[g], perm[p]))
    assert moved.oa == base.oa
    assert moved.kappa == pytest.approx(base.kappa, abs=1e-12)
    assert moved.macro_f1 == pytest.approx(base.macro_f1, abs=1e-12)
    np.testing.assert_allclose(moved.f1[perm], base.f1, atol=1e-12)


@given(label_maps, label_maps)
def test_micro_average_equals_oa(g, p):
    c = confusion(g, p).counts
    tp = np.trace(c)
    micro_p = tp / c.sum(axis=0).sum()
    micro_r = tp / c.sum(axis=1).sum()
    oa = compute_metrics(confusion(g, p)).oa
    assert micro_p == micro_r == oa


# normalized matrix

def test_normalize_rows_cases():
    ident, empty = normalize_rows(ConfusionMatrix(np.diag([3, 1, 4, 1])))
    np.testing.assert_array_equal(ident, np.eye(4))
    assert not empty.any()
    counts = np.zeros((4, 4), dtype=np.int64)
    counts[3] = [0, 0, 818, 182]
    counts[0, 0] = 5
    norm, empty = normalize_rows(ConfusionMatrix(counts))
    np.testing.assert_allclose(norm[3], [0, 0, 0.818, 0.182], atol=1e-12)
    assert list(np.flatnonzero(empty)) == [1, 2]
    np.testing.assert_array_equal(norm[1], 0)


@given(label_maps, label_maps)
def test_normalized_rows_sum_to_one(g, p):
    norm, empty = normalize_rows(confusion(g, p))
    np.testing.assert_allclose(norm.sum(axis=1)[~empty], 1.0, atol=1e-9)


# reports

def test_evaluate_maps_and_json(rng):
    labels, preds = rng.integers(0, 4, (2, 8, 8)), rng.integers(0, 4, (2, 8, 8))
    reps = evaluate_maps(labels, preds)
    assert reps["four_class"].granularity == "4-class" and reps["binary"].granularity == "binary"
    doc = json.loads(reps["binary"].to_json())
    assert doc["classes"] == ["no-damage", "damaged"]
    assert np.array(doc["confusion"]).sum() == labels.size


def test_table_row_csv_order(rng):
    reps = evaluate_maps(rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8)))
    text = rows_to_csv([table_row(reps["binary"], 1234)], TABLE_COLUMNS)
    header, row = text.strip().split("\n")
    assert header.split(",") == list(TABLE_COLUMNS)
    assert row.split(",")[-1] == "1234"
