import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score

from lpbnn.metrics import (
    MetricsReport,
    PredictionBatch,
    accuracy,
    aupr,
    auroc,
    compute_report,
    corrupted_metrics,
    diversity_stats,
    ece,
    ensemble_predict,
    fpr_at_95_tpr,
    max_class_probability,
    pair_counts,
    predictive_entropy,
    read_prediction_dump,
    write_prediction_dump,
)
from oracles import brute_auroc, exhaustive_fpr95, histogram_ece, random_probs


# ----------------------------------------------------------- prediction


def test_ensemble_predict_examples():
    single = PredictionBatch(np.array([[[0.3, 0.7]]]))
    np.testing.assert_array_equal(ensemble_predict(single), [[0.3, 0.7]])
    pair = PredictionBatch(np.array([[[0.6, 0.4]], [[0.2, 0.8]]]))
    np.testing.assert_allclose(ensemble_predict(pair), [[0.4, 0.6]], atol=1e-15)


def test_prediction_batch_validation():
    with pytest.raises(ValueError):
        PredictionBatch(np.array([[[0.5, 0.6]]]))
    with pytest.raises(ValueError):
        PredictionBatch(np.array([[[1.0]]]))
    with pytest.raises(ValueError):
        PredictionBatch(np.full((1, 2, 2), 0.5), labels=[0])


def test_entropy_examples():
    np.testing.assert_array_equal(predictive_entropy(np.array([[0.0, 1.0, 0.0]])), [0.0])
    np.testing.assert_allclose(predictive_entropy(np.full((1, 4), 0.25)), [math.log(4)], rtol=1e-12)


# ------------------------------------------------------------------ ECE


def test_ece_examples():
    probs = np.eye(3)[[0, 1, 2, 1]]
    assert ece(probs, [0, 1, 2, 1]) == 0.0
    probs = np.tile([0.9, 0.1], (10, 1))
    labels = np.array([0] * 5 + [1] * 5)
    assert math.isclose(ece(probs, labels), 0.4, rel_tol=1e-12)


def test_ece_edge_ties_go_to_lower_bin():
    # with M=5, confidence 0.6 sits on an edge and belongs to (0.4, 0.6]
    probs = np.array([[0.6, 0.4], [0.5, 0.5], [0.45, 0.55]])
    labels = np.array([0, 1, 1])
    # single bin: accuracy 2/3 vs mean confidence (0.6 + 0.5 + 0.55) / 3
    assert math.isclose(ece(probs, labels, M=5), abs(2 / 3 - 0.55), rel_tol=1e-12)


def test_ece_matches_direct_histogram_exactly():
    rng = np.random.default_rng(0)
    for _ in range(30):
        N, C = rng.integers(1, 300), rng.integers(2, 6)
        probs = random_probs(rng, 1, N, C)[0]
        labels = rng.integers(0, C, size=N)
        assert ece(probs, labels) == histogram_ece(probs, labels)


# ------------------------------------------------------------------ OOD


def test_auroc_examples():
    assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert auroc([0.5] * 3, [0.5] * 4) == 0.5
    assert auroc([0.9, 0.6], [0.7, 0.1]) == 0.75


def test_auroc_matches_brute_force_exactly():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s_in = rng.integers(0, 20, size=rng.integers(1, 200)) / 20.0
        s_out = rng.integers(0, 20, size=rng.integers(1, 200)) / 20.0
        assert auroc(s_in, s_out) == brute_auroc(s_in, s_out)


def test_aupr_examples():
    assert aupr([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert aupr([0.9], [0.1, 0.2]) == 1.0
    with pytest.raises(ValueError):
        aupr([0.9], [])


def test_aupr_matches_average_precision():
    rng = np.random.default_rng(2)
    for _ in range(30):
        s_in = rng.integers(0, 15, size=rng.integers(1, 100)) / 15.0
        s_out = rng.integers(0, 15, size=rng.integers(1, 100)) / 15.0
        y = np.r_[np.ones(s_in.size), np.zeros(s_out.size)]
        ref = average_precision_score(y, np.r_[s_in, s_out])
        assert math.isclose(aupr(s_in, s_out), ref, rel_tol=1e-12, abs_tol=1e-15)


def test_fpr95_examples():
    assert fpr_at_95_tpr([0.9, 0.8, 0.95], [0.1, 0.2]) == 0.0
    assert fpr_at_95_tpr([0.3] * 10, [0.3] * 5) == 1.0
    s_in = np.arange(1, 101) / 100.0
    s_out = np.full(20, 0.5)
    assert fpr_at_95_tpr(s_in, s_out) == exhaustive_fpr95(s_in, s_out) == 1.0


def test_fpr95_matches_exhaustive_threshold_search():
    rng = np.random.default_rng(3)
    for _ in range(50):
        s_in = rng.integers(0, 30, size=rng.integers(1, 150)) / 30.0
        s_out = rng.integers(0, 30, size=rng.integers(1, 150)) / 30.0
        assert fpr_at_95_tpr(s_in, s_out) == exhaustive_fpr95(s_in, s_out)


score_lists = st.lists(st.integers(0, 40), min_size=1, max_size=40)


@settings(max_examples=80, deadline=None)
@given(score_lists, score_lists)
def test_ood_metrics_invariant_under_increasing_transforms(a, b):
    s_in, s_out = np.array(a, float), np.array(b, float)
    t_in, t_out = np.exp(s_in / 7.0), np.exp(s_out / 7.0)
    assert auroc(s_in, s_out) == auroc(t_in, t_out)
    assert aupr(s_in, s_out) == aupr(t_in, t_out)
    assert fpr_at_95_tpr(s_in, s_out) == fpr_at_95_tpr(t_in, t_out)


@settings(max_examples=80, deadline=None)
@given(score_lists, score_lists)
def test_ood_metrics_in_range(a, b):
    for v in (auroc(a, b), aupr(a, b), fpr_at_95_tpr(a, b)):
        assert 0.0 <= v <= 1.0


# ------------------------------------------------------------ corrupted


def _labelled(acc_pattern, severity):
    correct = np.array(acc_pattern, bool)
    probs = np.where(correct[:, None], [0.8, 0.2], [0.2, 0.8])[None]
    return PredictionBatch(probs, np.zeros(len(correct), int), severity=severity)


def test_corrupted_metrics_examples():
    b = _labelled([1, 1, 0, 1], 1)
    pm = ensemble_predict(b)
    assert corrupted_metrics([b]) == (accuracy(pm, b.labels), ece(pm, b.labels))
    cA, _ = corrupted_metrics([_labelled([1] * 8 + [0] * 2, 1), _labelled([1] * 6 + [0] * 4, 2)])
    assert math.isclose(cA, 0.7, rel_tol=1e-12)
    with pytest.raises(ValueError):
        corrupted_metrics([PredictionBatch(b.probs, b.labels, severity=0)])


# ------------------------------------------------------------ diversity


def test_q_statistic_counting_example():
    a = np.array([1, 1, 0, 1, 0], bool)
    b = np.array([1, 1, 0, 0, 1], bool)
    assert pair_counts(a, b) == (2, 1, 1, 1)
    stats = diversity_stats(np.stack([a, b]))
    assert math.isclose(stats.q_statistic, 1 / 3, rel_tol=1e-12)
    assert stats.ratio_error == 2.0


def test_q_statistic_identical_classifiers():
    a = np.array([1, 0, 1, 1, 0], bool)
    assert diversity_stats(np.stack([a, a])).q_statistic == 1.0


def test_q_statistic_disjoint_errors():
    a = np.array([0, 1, 1, 1], bool)
    b = np.array([1, 0, 1, 1], bool)
    stats = diversity_stats(np.stack([a, b]))
    assert stats.q_statistic == -1.0
    assert stats.ratio_error == math.inf
    assert any("no shared errors" in f for f in stats.flags)


def test_diversity_degenerate_flags():
    always = np.ones(4, bool)
    stats = diversity_stats(np.stack([always, always]))
    assert stats.q_statistic == 0.0 and stats.corr_coeff == 0.0
    assert len(stats.flags) == 3
    with pytest.raises(ValueError):
        diversity_stats(np.ones((1, 4), bool))


def test_error_correlation_matches_pearson():
    rng = np.random.default_rng(4)
    mc = rng.random((2, 200)) < 0.7
    stats = diversity_stats(mc)
    ref = np.corrcoef((~mc[0]).astype(float), (~mc[1]).astype(float))[0, 1]
    assert math.isclose(stats.corr_coeff, ref, rel_tol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(5, 40), st.integers(0, 2**31 - 1))
def test_diversity_symmetric_under_member_reordering(J, N, seed):
    rng = np.random.default_rng(seed)
    mc = rng.random((J, N)) < 0.6
    a = diversity_stats(mc)
    b = diversity_stats(mc[rng.permutation(J)])
    for x, y in [(a.q_statistic, b.q_statistic), (a.corr_coeff, b.corr_coeff), (a.ratio_error, b.ratio_error)]:
        assert x == y or math.isclose(x, y, rel_tol=1e-12, abs_tol=1e-12)
    assert -1.0 <= a.q_statistic <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 30), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_ensemble_mean_rows_are_distributions(J, N, C, seed):
    probs = random_probs(np.random.default_rng(seed), J, N, C, temp=5.0)
    pm = ensemble_predict(PredictionBatch(probs))
    assert np.all(pm >= 0)
    np.testing.assert_allclose(pm.sum(axis=1), 1.0, atol=1e-8)
    assert np.all(max_class_probability(pm) >= 1.0 / C - 1e-12)


# --------------------------------------------------------------- report


def _batches(rng, J=3, N=40, C=3):
    return [
        PredictionBatch(random_probs(rng, J, N, C), rng.integers(0, C, N)),
        PredictionBatch(random_probs(rng, J, N, C, temp=0.3), None, ood=True),
        PredictionBatch(random_probs(rng, J, N, C), rng.integers(0, C, N), severity=1),
        PredictionBatch(random_probs(rng, J, N, C), rng.integers(0, C, N), severity=2),
    ]


def test_report_contents():
    rep = compute_report(_batches(np.random.default_rng(5)), {"seed": 0})
    for key in ("accuracy", "ece", "nll", "auroc", "aupr", "fpr95", "cA", "cE", "entropy_test",
                "entropy_ood", "q_statistic", "ratio_error", "corr_coeff", "ece_s1", "ece_s2"):
        assert key in rep.metrics
    assert rep.metadata["J"] == 3
    assert 0.0 <= rep.metrics["auroc"] <= 1.0
    assert -1.0 <= rep.metrics["q_statistic"] <= 1.0


def test_single_member_report_skips_diversity():
    rng = np.random.default_rng(6)
    rep = compute_report([PredictionBatch(random_probs(rng, 1, 20, 2), rng.integers(0, 2, 20))])
    assert "q_statistic" not in rep.metrics
    assert any("diversity" in f for f in rep.flags)


def test_non_finite_metrics_become_null(tmp_path):
    rep = MetricsReport({"a": 1.0, "b": math.inf}, {"seed": 1})
    path = tmp_path / "m.json"
    rep.to_json(path)
    data = json.loads(path.read_text())
    assert data["metrics"] == {"a": 1.0, "b": None}
    assert data["flags"]


def test_prediction_dump_roundtrip(tmp_path):
    batches = _batches(np.random.default_rng(7))
    path = tmp_path / "pred.csv"
    write_prediction_dump(path, batches)
    header = path.read_text().splitlines()[0]
    assert header == "member,sample_id,label,ood,severity,p_0,p_1,p_2"
    back = read_prediction_dump(path)
    assert len(back) == len(batches)
    for a, b in zip(batches, back):
        np.testing.assert_array_equal(a.probs, b.probs)
        assert a.ood == b.ood and a.severity == b.severity
        if a.labels is None:
            assert b.labels is None
        else:
            np.testing.assert_array_equal(a.labels, b.labels)
    assert compute_report(back).metrics == compute_report(batches).metrics
