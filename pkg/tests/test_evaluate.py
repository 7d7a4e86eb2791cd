from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defectnet.errors import MetricError
from defectnet.evaluate import (
    EvalReport,
    aggregate_folds,
    average_precision,
    best_f_measure,
    evaluate_scores,
    format_class_table,
    pr_curve,
    score_dataset,
)
from defectnet.model import ModelConfig, build_model


# ---------------------------------------------------------------- oracles


def definitional_ap(scores, labels) -> float:
    """For every distinct threshold count predictions from scratch, then sum steps."""
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


def brute_force_best_f(scores, labels):
    """Scan every cut point; exact F1 as a Fraction; ties to the higher threshold."""
    best = None
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        fn = sum(1 for s, y in zip(scores, labels) if s < t and y)
        f1 = Fraction(2 * tp, 2 * tp + fp + fn)
        if best is None or f1 > best[0]:
            best = (f1, t, fp, fn)
    return best


def random_case(rng, max_len=50):
    n = int(rng.integers(2, max_len + 1))
    # coarse scores so ties are common
    scores = (rng.integers(0, rng.integers(2, 30), n) / 29.0).tolist()
    labels = rng.integers(0, 2, n).tolist()
    labels[int(rng.integers(n))] = 1
    return scores, labels


# ---------------------------------------------------------------- AP


def test_ap_worked_example():
    assert average_precision([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)


def test_ap_perfect_separation():
    assert average_precision([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0


def test_ap_all_positive():
    assert average_precision([0.1, 0.7, 0.3], [1, 1, 1]) == 1.0


def test_ap_needs_a_positive():
    with pytest.raises(MetricError):
        average_precision([0.1, 0.2], [0, 0])


def test_ap_ties_enter_together():
    # all tied: one threshold, recall 1, precision 1/2
    assert average_precision([0.5] * 4, [1, 0, 1, 0]) == 0.5


def test_ap_matches_definition_random():
    rng = np.random.default_rng(0)
    for _ in range(300):
        scores, labels = random_case(rng)
        assert average_precision(scores, labels) == pytest.approx(
            definitional_ap(scores, labels), abs=1e-9
        )


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1000), st.booleans()), min_size=2, max_size=30))
def test_ap_invariant_to_monotone_transform(pairs):
    # a coarse grid keeps the transform strictly increasing in floating point
    scores = [s / 1000 for s, _ in pairs]
    labels = [int(y) for _, y in pairs]
    if not any(labels):
        labels[0] = 1
    transformed = [np.exp(3 * s) - 7 for s in scores]
    assert average_precision(scores, labels) == pytest.approx(
        average_precision(transformed, labels), abs=1e-12
    )


def test_pr_points_recall_non_decreasing():
    rng = np.random.default_rng(3)
    scores, labels = random_case(rng)
    recalls = [r for r, _ in pr_curve(scores, labels)]
    assert recalls == sorted(recalls) and recalls[-1] == 1.0


# ---------------------------------------------------------------- best F


def test_best_f_separable():
    t, fp, fn, tpr, tnr = best_f_measure([0.9, 0.1], [1, 0])
    assert (t, fp, fn, tpr, tnr) == (0.9, 0, 0, 1.0, 1.0)


def test_best_f_worked_example():
    t, fp, fn, tpr, tnr = best_f_measure([0.9, 0.8, 0.1], [1, 0, 1])
    assert t <= 0.1 and (fp, fn) == (1, 0)
    assert tpr == 1.0 and tnr == 0.0


def test_best_f_tie_goes_to_higher_threshold():
    # threshold 0.9: TP1 FN1 -> F=2/3; threshold 0.5: TP2 FP2 -> F=2/3
    t, *_ = best_f_measure([0.9, 0.5, 0.5, 0.5], [1, 1, 0, 0])
    assert t == 0.9


def test_best_f_single_class():
    with pytest.raises(MetricError):
        best_f_measure([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        best_f_measure([0.1, 0.2], [0, 0])


def test_best_f_matches_cut_point_scan():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 300:
        scores, labels = random_case(rng)
        if all(labels):
            continue
        _, t_ref, fp_ref, fn_ref = brute_force_best_f(scores, labels)
        t, fp, fn, tpr, tnr = best_f_measure(scores, labels)
        assert (t, fp, fn) == (t_ref, fp_ref, fn_ref)
        n_pos, n_neg = sum(labels), len(labels) - sum(labels)
        assert tpr == pytest.approx((n_pos - fn) / n_pos, abs=1e-12)
        assert tnr == pytest.approx((n_neg - fp) / n_neg, abs=1e-12)
        checked += 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-500, 500), st.booleans()), min_size=2, max_size=30))
def test_best_f_counts_invariant_to_monotone_transform(pairs):
    scores = [s / 100 for s, _ in pairs]
    labels = [int(y) for _, y in pairs]
    labels[0], labels[-1] = 1, 0
    _, fp, fn, _, _ = best_f_measure(scores, labels)
    _, fp2, fn2, _, _ = best_f_measure([2 * s + 1 for s in scores], labels)
    assert (fp, fn) == (fp2, fn2)


# ---------------------------------------------------------------- reports and folds


def _report(ap, fp, fn):
    return EvalReport(pr_points=[(1.0, 1.0)], ap=ap, best_threshold=0.5, fp=fp, fn=fn, tpr=1, tnr=1)


def test_aggregate_folds():
    summary = aggregate_folds([_report(1.0, 1, 0), _report(0.9, 0, 2), _report(0.8, 2, 1)])
    assert summary.mean_ap == pytest.approx(0.9, abs=1e-15)
    assert (summary.fp, summary.fn, summary.n_folds) == (3, 3, 3)


def test_aggregate_single_fold_is_identity():
    summary = aggregate_folds([_report(0.7, 4, 5)])
    assert (summary.mean_ap, summary.fp, summary.fn) == (0.7, 4, 5)


def test_aggregate_needs_reports():
    with pytest.raises(ValueError):
        aggregate_folds([])


def test_evaluate_scores_report_invariants(tmp_path):
    rng = np.random.default_rng(8)
    scores, labels = random_case(rng)
    labels[0] = 0
    labels[1] = 1
    report = evaluate_scores(scores, labels)
    assert 0.0 <= report.ap <= 1.0
    assert report.fp <= report.n_neg and report.fn <= report.n_pos
    report.write(tmp_path / "r.txt")
    kv = dict(line.split("=", 1) for line in (tmp_path / "r.txt").read_text().splitlines())
    assert float(kv["ap"]) == report.ap and int(kv["fp"]) == report.fp
    report.write_pr_table(tmp_path / "pr.tsv")
    assert (tmp_path / "pr.tsv").read_text().splitlines()[0] == "recall\tprecision"


def test_class_table():
    table = format_class_table({"1": _report(1.0, 0, 0), "2": _report(1.0, 0, 0)})
    assert table.splitlines() == ["class\tTPR\tTNR", "1\t100.0\t100.0", "2\t100.0\t100.0"]


def test_score_dataset(tiny_split):
    model = build_model(ModelConfig(base_channels=2))
    assert score_dataset(model, []) == ([], [])
    scores, labels = score_dataset(model, tiny_split.samples)
    assert labels == [1] * 4 + [0] * 6
    assert all(0.0 <= s <= 1.0 for s in scores)
    assert score_dataset(model, tiny_split.samples) == (scores, labels)
