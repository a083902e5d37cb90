import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anchor_uq import nn
from anchor_uq.anchoring import Dataset, predict_delta_uq, sample_anchors, train_delta_uq
from anchor_uq.errors import MetricError
from anchor_uq.metrics import (
    ClampedProbabilityWarning, aupr, auroc, brier, calibration_report, detection_report, dtacc, ece, nll,
    normalized_uncertainty, softmax, temper_logits,
)

HAND_SCORES = np.array([0.9, 0.3, 0.3, 0.7, 0.1, 0.5])
HAND_LABELS = np.array([1, 0, 1, 0, 0, 1])


def brute_auroc(scores, labels):
    out, inl = scores[labels == 1], scores[labels == 0]
    wins = sum(1.0 if o > i else 0.5 if o == i else 0.0 for o, i in itertools.product(out, inl))
    return wins / (len(out) * len(inl))


def brute_dtacc(scores, labels):
    best = 0.0
    for t in list(scores) + [np.inf, -np.inf]:
        flagged = scores >= t
        tpr = np.mean(flagged[labels == 1])
        tnr = np.mean(~flagged[labels == 0])
        best = max(best, 0.5 * (tpr + tnr))
    return best


def brute_aupr(scores, positive):
    # walk thresholds from high to low, interpolating precision from the right
    points = []
    for t in sorted(set(scores), reverse=True):
        pred = scores >= t
        tp = np.sum(pred & positive)
        points.append((tp / positive.sum(), tp / pred.sum()))
    area, prev_recall = 0.0, 0.0
    for k, (recall, _) in enumerate(points):
        area += (recall - prev_recall) * max(p for _, p in points[k:])
        prev_recall = recall
    return area


def test_hand_set_matches_threshold_enumeration():
    labels = HAND_LABELS.astype(bool)
    assert auroc(HAND_SCORES, HAND_LABELS) == pytest.approx(brute_auroc(HAND_SCORES, HAND_LABELS), abs=1e-15)
    assert dtacc(HAND_SCORES, HAND_LABELS) == pytest.approx(brute_dtacc(HAND_SCORES, HAND_LABELS), abs=1e-15)
    assert aupr(HAND_SCORES, HAND_LABELS, "out") == pytest.approx(brute_aupr(HAND_SCORES, labels), abs=1e-15)
    assert aupr(HAND_SCORES, HAND_LABELS, "in") == pytest.approx(brute_aupr(-HAND_SCORES, ~labels), abs=1e-15)


def test_hand_set_frozen_values():
    # 9 pairs: 6.5 outlier wins -> 13/18
    assert auroc(HAND_SCORES, HAND_LABELS) == pytest.approx(13 / 18)
    assert dtacc(HAND_SCORES, HAND_LABELS) == pytest.approx(2 / 3)


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, 6, elements=st.integers(0, 4)), arrays(np.int64, 6, elements=st.integers(0, 1)))
def test_random_six_sample_sets_match_enumeration(scores, labels):
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores = scores.astype(float)
    pos = labels.astype(bool)
    assert auroc(scores, labels) == pytest.approx(brute_auroc(scores, labels), abs=1e-12)
    assert dtacc(scores, labels) == pytest.approx(brute_dtacc(scores, labels), abs=1e-12)
    assert aupr(scores, labels, "out") == pytest.approx(brute_aupr(scores, pos), abs=1e-12)
    assert aupr(scores, labels, "in") == pytest.approx(brute_aupr(-scores, ~pos), abs=1e-12)


def test_perfect_separation_and_full_ties():
    scores = np.array([0.1, 0.2, 0.3, 0.8, 0.9])
    labels = np.array([0, 0, 0, 1, 1])
    report = detection_report(scores, labels)
    assert report == {"AUROC": 1.0, "DTACC": 1.0, "AUPR-In": 1.0, "AUPR-Out": 1.0}
    assert auroc(np.ones(5), labels) == 0.5


def test_string_labels_and_errors():
    assert auroc([0.2, 0.9], ["inlier", "outlier"]) == 1.0
    with pytest.raises(MetricError):
        auroc([0.2, 0.9], ["in", "out"])
    with pytest.raises(MetricError):
        auroc([0.2, 0.9], [1, 1])
    with pytest.raises(MetricError):
        dtacc([0.2, np.nan], [0, 1])
    with pytest.raises(MetricError):
        aupr([0.2, 0.9], [0, 1], positive="both")


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, 12, elements=st.integers(-500, 500)), st.integers(0, 2**16))
def test_auroc_is_invariant_under_monotone_maps(scores, seed):
    scores = scores / 100.0
    labels = np.random.default_rng(seed).integers(0, 2, 12)
    labels[:2] = [0, 1]
    base = auroc(scores, labels)
    assert auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
    assert auroc(3 * scores ** 3 + 1, labels) == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def test_ece_zero_for_calibrated_forecasts():
    # 10 forecasts at confidence 0.7, exactly 7 correct; 10 at 0.9, exactly 9 correct
    probs = np.array([[0.7, 0.3]] * 10 + [[0.1, 0.9]] * 10)
    labels = np.array([0] * 7 + [1] * 3 + [1] * 9 + [0])
    assert ece(probs, labels) == pytest.approx(0.0, abs=1e-12)


def test_ece_hand_value():
    probs = np.array([[0.8, 0.2], [0.8, 0.2]])
    assert ece(probs, [0, 1]) == pytest.approx(0.3)
    assert ece(probs, [0, 1], n_bins=1) == pytest.approx(0.3)


def test_nll_and_brier_reference_values():
    c = 5
    uniform = np.full((4, c), 1 / c)
    assert nll(uniform, [0, 1, 2, 3]) == pytest.approx(math.log(c))
    onehot = np.eye(c)[[0, 3, 1]]
    assert brier(onehot, [0, 3, 1]) == 0.0
    assert brier(onehot, [1, 3, 1]) == pytest.approx(2 / 3)


def test_nll_clamps_zero_probability():
    with pytest.warns(ClampedProbabilityWarning):
        value = nll(np.array([[1.0, 0.0]]), [1])
    assert value == pytest.approx(-math.log(1e-12))


def test_forecast_validation():
    with pytest.raises(MetricError):
        ece(np.array([[0.5, 0.6]]), [0])
    with pytest.raises(MetricError):
        brier(np.array([[0.5, 0.5]]), [2])
    with pytest.raises(MetricError):
        nll(np.array([[0.5, 0.5]]), [0, 1])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (8, 3), elements=st.floats(-8, 8)), st.integers(0, 2**16))
def test_calibration_metric_ranges(logits, seed):
    labels = np.random.default_rng(seed).integers(0, 3, 8)
    report = calibration_report(softmax(logits), labels)
    assert 0.0 <= report["ECE"] <= 1.0
    assert 0.0 <= report["Brier"] <= 2.0
    assert report["NLL"] >= 0.0


# ---------------------------------------------------------------------------
# tempering
# ---------------------------------------------------------------------------


def test_temper_two_sample_hand_case():
    mu = np.array([[2.0, -1.0], [4.0, 1.0]])
    sigma = np.array([[1.0, 1.0], [3.0, 3.0]])
    norm = normalized_uncertainty(sigma)
    assert norm[0] == 0.0 and 0.999 < norm[1] < 1.0
    out = temper_logits(mu, sigma)
    np.testing.assert_array_equal(out[0], mu[0])
    assert np.all(np.abs(out[1]) < 1e-5 * np.abs(mu[1]))
    assert np.argmax(out[1]) == 0


def test_constant_uncertainty_means_no_tempering():
    mu = np.array([[1.0, 2.0], [3.0, 0.0]])
    np.testing.assert_array_equal(temper_logits(mu, np.full((2, 2), 0.4)), mu)


def test_temper_validation():
    with pytest.raises(MetricError):
        temper_logits(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(MetricError):
        temper_logits(np.zeros((2, 2)), -np.ones((2, 2)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tempering_preserves_argmax(seed):
    r = np.random.default_rng(seed)
    n, c = r.integers(1, 20), r.integers(2, 10)
    mu = r.normal(size=(n, c)) * 5
    sigma = r.exponential(size=(n, c))
    np.testing.assert_array_equal(np.argmax(temper_logits(mu, sigma), axis=1), np.argmax(mu, axis=1))


# ---------------------------------------------------------------------------
# end to end: anchored uncertainty flags far-away points
# ---------------------------------------------------------------------------


def two_moons(n, rng, noise=0.08):
    t = rng.uniform(0, np.pi, n)
    upper = rng.random(n) < 0.5
    x = np.where(upper, np.cos(t), 1 - np.cos(t))
    y = np.where(upper, np.sin(t), 0.5 - np.sin(t))
    pts = np.column_stack([x, y]) + noise * rng.normal(size=(n, 2))
    return pts, (~upper).astype(int)


def test_delta_uq_scores_separate_far_outliers():
    rng = np.random.default_rng(0)
    x, y = two_moons(200, rng)
    # one-hot regression keeps the outputs bounded; cross-entropy logits grow along the class boundary
    ds = Dataset(x, np.eye(2)[y])
    model = train_delta_uq(ds, nn.MlpConfig(4, (64, 64), output_dim=2, seed=0), nn.TrainConfig(1e-3, 150, 32))
    anchors = sample_anchors(x, 10, np.random.default_rng(1))
    x_in, _ = two_moons(100, rng)
    angle = rng.uniform(0, 2 * np.pi, 100)
    x_out = np.column_stack([0.5 + 4 * np.cos(angle), 0.25 + 4 * np.sin(angle)])
    queries = np.vstack([x_in, x_out])
    scores = predict_delta_uq(model, queries, anchors).std.mean(axis=1)
    assert auroc(scores, np.r_[np.zeros(100), np.ones(100)]) > 0.8
