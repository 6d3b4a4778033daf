"""Anomaly scores for batches and single samples.

SensNorm compares the signed weight sensitivities ``w * dL/dw`` of a
batch against their per-weight mean and standard deviation over the
training batches, and reports the p-norm of the standardized
difference.  Higher scores mean more anomalous.  MSP and GradNorm score
in-distribution inputs higher.

The default loss is KL(u || softmax) against the uniform distribution,
which needs no labels and keeps a gradient on saturated predictions.
With ``pseudo_label`` the profile uses the training labels and test
batches the model's own argmax, whose cross-entropy vanishes on
confident inputs such as rescaled images.

"""

import collections
import dataclasses
import logging
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .data import augment
from .functional import cross_entropy, kl_to_uniform
from .models import predict

logger = logging.getLogger(__name__)

LOSSES = ("pseudo_label", "kl_uniform")


class DetectionError(ValueError):
    """Raised for unusable profiles or models."""

    pass


@dataclasses.dataclass
class SensitivityProfile:
    mean: dict
    std: dict
    batch_size: int
    p: float = 5.0
    sigma_floor: float = 1e-8
    test_loss: str = "kl_uniform"
    augmentations: int = 0
    image_shape: Optional[Tuple[int, int, int]] = None
    batches: int = 0


class DetectionResult(collections.namedtuple("DetectionResult", "score threshold")):
    """An anomaly score and the threshold it was compared against."""

    __slots__ = ()

    @property
    def anomalous(self):
        return self.score >= self.threshold


def sensitivity(model, x, y=None, loss="cross_entropy"):
    """Signed sensitivities ``w * dL/dw`` of every prunable weight."""
    leaves = model.leaves(model.means)
    logits = model.forward(x, model.effective(leaves))
    if loss == "kl_uniform":
        value = kl_to_uniform(logits)
    else:
        value = cross_entropy(logits, y)
    names = model.prunable
    grads = T.backward(value, [leaves[name] for name in names])
    return {name: model.params[name] * grads[leaves[name]] for name in names}


def _profile_batches(data, batch_size, augmentations, seed):
    if not augmentations:
        for x, y in data.batches(batch_size, drop_last=True):
            yield x, y
        return
    for i in range(len(data)):
        batch = augment(data.inputs[i], augmentations, data.image_shape, seed=[seed, i])
        yield batch, None if data.labels is None else np.full(batch.shape[0], data.labels[i])


def fit_profile(
    model,
    data,
    batch_size,
    p=5.0,
    sigma_floor=1e-8,
    test_loss="kl_uniform",
    augmentations=0,
    seed=0,
    limit=None,
):
    """Per-weight mean and standard deviation of training sensitivities.

    With `augmentations` set, every profile batch holds one training
    sample and that many augmented copies, and `batch_size` must be one
    more than the augmentation count.  Incomplete trailing batches are
    dropped.

    """
    if test_loss not in LOSSES:
        raise DetectionError("Unknown test loss %r" % test_loss)
    if test_loss == "pseudo_label" and data.labels is None:
        raise DetectionError("Profile data needs labels")
    if augmentations and batch_size != augmentations + 1:
        raise DetectionError("Batch size %d does not match %d augmentations" % (batch_size, augmentations))
    loss = "kl_uniform" if test_loss == "kl_uniform" else "cross_entropy"
    count = 0
    mean, m2 = {}, {}
    for x, y in _profile_batches(data, batch_size, augmentations, seed):
        if limit is not None and count == limit:
            break
        count += 1
        for name, g in sensitivity(model, x, y, loss).items():
            if name not in mean:
                mean[name] = np.zeros_like(g)
                m2[name] = np.zeros_like(g)
            delta = g - mean[name]
            mean[name] = mean[name] + delta / count
            m2[name] = m2[name] + delta * (g - mean[name])
    if count < 2:
        raise DetectionError("Need at least 2 profile batches, got %d" % count)
    std = {name: np.sqrt(m2[name] / count) for name in m2}
    logger.info("Fitted sensitivity profile over %d batches of %d", count, batch_size)
    return SensitivityProfile(
        mean,
        std,
        batch_size,
        p,
        sigma_floor,
        test_loss,
        augmentations,
        data.image_shape,
        count,
    )


def lp_norm(values, p):
    """The p-norm of `values`, computed without overflow."""
    values = np.abs(np.asarray(values, dtype=np.float64))
    if not values.size:
        return 0.0
    top = values.max()
    if top == 0:
        return 0.0
    return float(top * np.sum((values / top) ** p) ** (1.0 / p))


def sensnorm_score(model, profile, batch):
    """SensNorm score of a batch under the profile's test loss."""
    batch = np.asarray(batch)
    if len(batch) != profile.batch_size:
        logger.debug("Scoring a batch of %d against a profile fitted at %d", len(batch), profile.batch_size)
    if profile.test_loss == "kl_uniform":
        raw = sensitivity(model, batch, loss="kl_uniform")
    else:
        raw = sensitivity(model, batch, predict(model, batch).argmax(axis=1))
    z = []
    for name, g in raw.items():
        if name not in profile.mean or profile.mean[name].shape != g.shape:
            raise DetectionError("Profile does not match weight %s" % name)
        z.append(((g - profile.mean[name]) / np.maximum(profile.std[name], profile.sigma_floor)).reshape(-1))
    return lp_norm(np.concatenate(z), profile.p)


def sensnorm_single(model, profile, sample, k, seed=0):
    """SensNorm score of one sample plus `k` augmented copies."""
    if k < 0:
        raise DetectionError("Augmentation count must not be negative")
    if profile.batch_size != k + 1:
        raise DetectionError("Profile fitted at batch size %d, need %d" % (profile.batch_size, k + 1))
    if k and profile.image_shape is None:
        raise DetectionError("Rotation augmentations need image inputs")
    return sensnorm_score(model, profile, augment(sample, k, profile.image_shape, seed))


def msp_score(probs):
    """Maximum softmax probability of every row."""
    return np.asarray(probs).max(axis=1)


def batch_msp(probs):
    return float(np.mean(msp_score(probs)))


def gradnorm_score(model, batch):
    """Mean L1 norm of the final weight gradient of KL(uniform || prediction).

    The divergence runs from the uniform distribution to the softmax, as
    in the gradient-norm detector this baseline follows.  The robustness
    objectives in :mod:`prunelib.edgepopup` use KL(clean || adversarial)
    instead.

    """
    final = model.spec.layers[model.final_layer]
    if final.kind != "dense" or model.final_layer != len(model.spec.layers) - 1:
        raise DetectionError("GradNorm needs a final dense layer")
    features = model.features(batch)
    weights = model.effective(model.constants())
    w = weights["%d.weight" % model.final_layer].data
    b = weights["%d.bias" % model.final_layer]
    scores = []
    for row in features:
        leaf = T.Tensor(w, requires_grad=True)
        logits = T.matmul(T.Tensor(row[None]), T.transpose(leaf)) + b
        grad = T.backward(kl_to_uniform(logits), [leaf])[leaf]
        scores.append(np.abs(grad).sum())
    return float(np.mean(scores))


def detect(scores, threshold):
    """Threshold anomaly scores; a score at the threshold is anomalous."""
    return [DetectionResult(float(s), threshold) for s in scores]


def threshold_at_tpr(in_scores, tpr=0.95):
    """The smallest threshold leaving a fraction `tpr` of in-distribution scores normal.

    Scores must be oriented so that higher means more anomalous.

    """
    s = np.sort(np.asarray(in_scores, dtype=np.float64))
    if not s.size:
        raise DetectionError("No in-distribution scores")
    if not 0.0 < tpr <= 1.0:
        raise DetectionError("TPR must lie in (0, 1]")
    index = int(np.ceil(round(tpr * s.size, 9))) - 1
    return float(np.nextafter(s[index], np.inf))
