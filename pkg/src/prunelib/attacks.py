"""Fast gradient sign adversarial examples."""

import collections
import logging

import numpy as np

from .functional import cross_entropy
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)

NORMS = ("linf", "l2")


class AttackError(ValueError):
    """Raised for invalid attack settings or inputs."""

    pass


class AttackSpec(collections.namedtuple("AttackSpec", "norm epsilon clamp")):
    """Attack norm and budget in input units, plus the clamp interval.

    Budgets quoted in 0-255 pixel units are converted with
    :meth:`from_pixels`.

    """

    __slots__ = ()

    def __new__(cls, norm, epsilon, clamp=(0.0, 1.0)):
        if norm not in NORMS:
            raise AttackError("Unknown norm %r" % norm)
        if not epsilon > 0:
            raise AttackError("Budget must be positive")
        if clamp is not None and not clamp[0] < clamp[1]:
            raise AttackError("Empty clamp interval")
        return super(AttackSpec, cls).__new__(cls, norm, float(epsilon), clamp)

    @classmethod
    def from_pixels(cls, norm, epsilon, clamp=(0.0, 1.0)):
        return cls(norm, epsilon / 255.0, clamp)


def perturbation(grad, spec):
    """The one-step perturbation for an input gradient."""
    grad = np.asarray(grad, dtype=np.float64)
    if spec.norm == "linf":
        return spec.epsilon * np.sign(grad)
    flat = grad.reshape(grad.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    scaled = np.divide(flat, norms, out=np.zeros_like(flat), where=norms > 0)
    return (spec.epsilon * scaled).reshape(grad.shape)


def fgsm(model, x, y, spec):
    """Perturb `x` one step along the input gradient of the summed loss.

    `model` is any callable mapping an input tensor to logits.

    """
    if y is None:
        raise AttackError("Labels required")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if y.shape[0] != x.shape[0]:
        raise AttackError("Expected %d labels, got %d" % (x.shape[0], y.shape[0]))
    if not x.shape[0]:
        return x.copy()
    inputs = Tensor(x, requires_grad=True)
    loss = cross_entropy(model(inputs), y, reduction="sum")
    grad = backward(loss, [inputs])[inputs]
    out = x + perturbation(grad, spec)
    if spec.clamp is not None:
        out = np.clip(out, spec.clamp[0], spec.clamp[1])
    logger.debug("FGSM-%s with budget %g on %d samples", spec.norm, spec.epsilon, x.shape[0])
    return out
