"""Evaluation metrics."""

import logging

import numpy as np
from scipy.stats import rankdata

from . import tensor as T

logger = logging.getLogger(__name__)

HIGH = "high=anomalous"
LOW = "low=anomalous"

ORIENTATIONS = (HIGH, LOW)


class MetricError(ValueError):
    """Raised when a metric is undefined for its inputs."""

    pass


def _oriented(in_scores, anomaly_scores, orientation):
    if orientation not in ORIENTATIONS:
        raise MetricError("Unknown orientation %r" % (orientation,))
    a = np.asarray(in_scores, dtype=np.float64).reshape(-1)
    b = np.asarray(anomaly_scores, dtype=np.float64).reshape(-1)
    if not a.size:
        raise MetricError("No in-distribution scores")
    if not b.size:
        raise MetricError("No anomaly scores")
    if orientation == LOW:
        a, b = -a, -b
    return a, b


def auroc(in_scores, anomaly_scores, orientation=HIGH):
    """Probability that an anomaly scores as more anomalous, ties counting half."""
    a, b = _oriented(in_scores, anomaly_scores, orientation)
    ranks = rankdata(np.concatenate([a, b]))
    n = b.size
    u = ranks[a.size :].sum() - n * (n + 1) / 2.0
    return float(u / (a.size * n))


def aupr(in_scores, anomaly_scores, orientation=HIGH):
    """Average precision with anomalies as positives, by step integration."""
    a, b = _oriented(in_scores, anomaly_scores, orientation)
    scores = np.concatenate([a, b])
    positive = np.concatenate([np.zeros(a.size), np.ones(b.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, positive = scores[order], positive[order]
    last = np.r_[np.flatnonzero(np.diff(scores)), scores.size - 1]
    tp = np.cumsum(positive)[last]
    precision = tp / (last + 1)
    recall = tp / b.size
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def accuracy(probs, labels):
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if not labels.size:
        raise MetricError("No samples")
    return float(np.mean(probs.argmax(axis=1) == labels))


def brier(probs, labels):
    """Mean squared distance between predictions and one-hot labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if not labels.size:
        raise MetricError("No samples")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise MetricError("Label out of range")
    target = np.zeros_like(probs)
    target[np.arange(labels.size), labels] = 1.0
    return float(np.mean(np.sum((probs - target) ** 2, axis=1)))


def relative_metric(sparse, dense, kind="higher_better"):
    """Sparse relative to dense, so that values above 1 favor the sparse model."""
    if kind == "higher_better":
        if dense == 0:
            raise MetricError("Dense value is zero")
        return sparse / dense
    if kind == "lower_better":
        if sparse == 0:
            raise MetricError("Sparse value is zero")
        return dense / sparse
    raise MetricError("Unknown kind %r" % (kind,))


def _jvp(fn, x, v):
    h = 1e-6 * (1.0 + np.linalg.norm(x))
    return (fn(T.Tensor(x + h * v)).data - fn(T.Tensor(x - h * v)).data) / (2.0 * h)


def _vjp(fn, x, u):
    leaf = T.Tensor(x, requires_grad=True)
    out = fn(leaf)
    return T.backward(T.sum(T.mul(out, u)), [leaf])[leaf]


def spectral_norm(fn, x, iterations=20, rng=None):
    """Power-iteration estimate of the largest singular value of the Jacobian of `fn` at `x`."""
    if iterations < 1:
        raise MetricError("At least one iteration required")
    rng = rng or np.random.default_rng(0)
    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    for _ in range(iterations):
        w = _vjp(fn, x, _jvp(fn, x, v))
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
    return float(np.linalg.norm(_jvp(fn, x, v)))


def lipschitz_lower_bound(model, inputs, iterations=20, seed=0):
    """Largest input-output Jacobian spectral norm over the sample inputs."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if not len(inputs):
        raise MetricError("No sample inputs")
    if iterations < 1:
        raise MetricError("At least one iteration required")
    best = 0.0
    for i, x in enumerate(inputs):
        sigma = spectral_norm(model, x[None], iterations, np.random.default_rng([seed, i]))
        best = max(best, sigma)
    logger.debug("Lipschitz lower bound %.4f over %d samples", best, len(inputs))
    return best
