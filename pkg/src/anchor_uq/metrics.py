"""Uncertainty-quality metrics: outlier detection scores, calibration scores and logit tempering.

Detection metrics take ``scores`` (higher means more uncertain) and
``labels`` marking outliers (``True``/``1``/``"outlier"``) against inliers.
Calibration metrics take a ``(n, C)`` probability matrix and integer class
labels.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError

ECE_BINS = 15
NLL_FLOOR = 1e-12
TEMPER_SPAN = 1.0 + 1e-6


class ClampedProbabilityWarning(RuntimeWarning):
    """A true-class probability was below the NLL floor and got clamped."""


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if labels.dtype.kind in "US":
        bad = ~np.isin(labels, ["inlier", "outlier"])
        if bad.any():
            raise MetricError(f"labels must be 'inlier'/'outlier', got {labels[bad][:3]}")
        outlier = labels == "outlier"
    else:
        outlier = labels.astype(bool)
    if scores.shape != outlier.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    if outlier.all() or not outlier.any():
        raise MetricError("detection metrics need both inliers and outliers")
    return scores, outlier


def auroc(scores, labels) -> float:
    """Probability an outlier outscores an inlier, ties counting half (midrank statistic)."""
    scores, outlier = _split(scores, labels)
    ranks = rankdata(scores)
    n_out = int(outlier.sum())
    n_in = outlier.size - n_out
    u = ranks[outlier].sum() - n_out * (n_out + 1) / 2.0
    return float(u / (n_out * n_in))


def dtacc(scores, labels) -> float:
    """Best balanced accuracy ``(TPR + TNR) / 2`` over all thresholds (outlier iff score >= t)."""
    scores, outlier = _split(scores, labels)
    thresholds = np.append(np.unique(scores), np.inf)
    flagged = scores[None, :] >= thresholds[:, None]
    tpr = (flagged & outlier).sum(axis=1) / outlier.sum()
    tnr = (~flagged & ~outlier).sum(axis=1) / (~outlier).sum()
    return float(np.max(0.5 * (tpr + tnr)))


def precision_recall(scores, positive):
    """Precision and recall at every distinct threshold, thresholds descending.

    ``positive`` marks the positive class; a sample is predicted positive
    when its score is at least the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    thresholds = np.unique(scores)[::-1]
    predicted = scores[None, :] >= thresholds[:, None]
    tp = (predicted & positive).sum(axis=1)
    precision = tp / predicted.sum(axis=1)
    recall = tp / positive.sum()
    return precision, recall, thresholds


def aupr(scores, labels, positive: str = "out") -> float:
    """Area under the interpolated precision-recall curve.

    ``positive="out"`` treats outliers as positives ranked by score;
    ``positive="in"`` treats inliers as positives ranked by negated score.
    Precision at recall ``r`` is interpolated as the best precision at any
    recall ``>= r``, and the area is the step sum over recall increments.
    """
    scores, outlier = _split(scores, labels)
    if positive == "out":
        s, pos = scores, outlier
    elif positive == "in":
        s, pos = -scores, ~outlier
    else:
        raise MetricError(f"positive must be 'in' or 'out', got {positive!r}")
    precision, recall, _ = precision_recall(s, pos)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * interp))


def detection_report(scores, labels) -> dict:
    return {
        "AUROC": auroc(scores, labels),
        "DTACC": dtacc(scores, labels),
        "AUPR-In": aupr(scores, labels, "in"),
        "AUPR-Out": aupr(scores, labels, "out"),
    }


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def _forecasts(probs, labels):
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    if probs.shape[0] != labels.size or probs.shape[0] == 0:
        raise MetricError(f"{probs.shape[0]} forecasts but {labels.size} labels")
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise MetricError("each forecast must be a probability vector (non-negative, summing to 1)")
    labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise MetricError("labels must index a class")
    return probs, labels


def ece(probs, labels, n_bins: int = ECE_BINS) -> float:
    """Expected calibration error over equal-width bins of the top-class confidence.

    Bin ``b`` covers ``((b-1)/n_bins, b/n_bins]``; a confidence of exactly
    0 goes to the first bin.
    """
    if n_bins < 1:
        raise MetricError("n_bins must be >= 1")
    probs, labels = _forecasts(probs, labels)
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    total = 0.0
    for b in np.unique(idx):
        sel = idx == b
        total += sel.sum() / conf.size * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def nll(probs, labels) -> float:
    """Mean negative log probability of the true class, floored at 1e-12 (with a warning)."""
    probs, labels = _forecasts(probs, labels)
    p = probs[np.arange(labels.size), labels]
    if np.any(p < NLL_FLOOR):
        warnings.warn(f"{int(np.sum(p < NLL_FLOOR))} true-class probabilities clamped to {NLL_FLOOR}",
                      ClampedProbabilityWarning, stacklevel=2)
        p = np.maximum(p, NLL_FLOOR)
    return float(-np.mean(np.log(p)))


def brier(probs, labels) -> float:
    """Mean squared distance between each forecast and the one-hot true label."""
    probs, labels = _forecasts(probs, labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.size), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def calibration_report(probs, labels, n_bins: int = ECE_BINS) -> dict:
    return {"ECE": ece(probs, labels, n_bins), "NLL": nll(probs, labels), "Brier": brier(probs, labels)}


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def normalized_uncertainty(sigma):
    """Per-sample mean sigma, min-max scaled over the batch into ``[0, 1)``.

    The span is widened by a factor ``1 + 1e-6`` so the largest value stays
    below 1.  A batch with constant mean sigma maps to all zeros.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
        raise MetricError("sigma must be finite and non-negative")
    s = sigma.mean(axis=1)
    lo, hi = s.min(), s.max()
    if not hi > lo:
        return np.zeros_like(s)
    return (s - lo) / ((hi - lo) * TEMPER_SPAN)


def temper_logits(mu_logits, sigma):
    """Scale each sample's mean logits by ``1 - normalized uncertainty``.

    The factor is a positive scalar per sample, so the predicted class
    never changes; confident samples keep their logits and the most
    uncertain ones are flattened toward uniform.
    """
    mu = np.atleast_2d(np.asarray(mu_logits, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    if mu.shape != sigma.shape:
        raise MetricError(f"logits {mu.shape} and sigma {sigma.shape} differ in shape")
    return mu * (1.0 - normalized_uncertainty(sigma))[:, None]
