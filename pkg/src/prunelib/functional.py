"""Losses over categorical predictions."""

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, exp, log_softmax, mean, mul, sum


def one_hot(labels, classes):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError("one_hot: expected 1-D labels, got %s" % (labels.shape,))
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError("Label out of range")
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1.0
    return out


def uniform(n, classes):
    return np.full((n, classes), 1.0 / classes)


def _targets(target, logits):
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if target.ndim == 1:
        target = one_hot(target, logits.shape[1])
    if target.shape != logits.shape:
        raise DimensionError("targets %s do not match logits %s" % (target.shape, logits.shape))
    return target


def cross_entropy(logits, target, reduction="mean"):
    """Cross-entropy of `logits` against integer labels or target distributions."""
    logits = as_tensor(logits)
    target = _targets(target, logits)
    per_sample = -sum(mul(log_softmax(logits), target), axis=1)
    if reduction == "sum":
        return sum(per_sample)
    return mean(per_sample)


def kl_categorical(log_p, log_q):
    """Batch-mean KL(p || q) from log-probabilities."""
    log_p, log_q = as_tensor(log_p), as_tensor(log_q)
    return mean(sum(mul(exp(log_p), log_p - log_q), axis=1))


def kl_to_uniform(logits):
    """Batch-mean KL(u || softmax(logits)) for the uniform distribution u."""
    logits = as_tensor(logits)
    n, c = logits.shape
    return cross_entropy(logits, uniform(n, c)) - float(np.log(c))
