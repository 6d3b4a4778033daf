"""First-order optimizers over named parameter arrays."""

import dataclasses
import logging

import numpy as np

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8

KINDS = ("sgd", "adam")


@dataclasses.dataclass
class OptimizerState:
    """Optimizer kind, learning rate and per-parameter moment estimates."""

    kind: str = "adam"
    lr: float = 2e-3
    moments: dict = dataclasses.field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError("Unknown optimizer %r" % self.kind)
        if not self.lr > 0:
            raise ValueError("Learning rate must be positive")

    def copy(self):
        return OptimizerState(
            self.kind,
            self.lr,
            {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()},
            self.step,
        )


def optimizer_step(state, params, grads, masks=None):
    """Return updated copies of `params`; `state` is advanced in place.

    Parameters without an entry in `grads` are passed through.  Entries
    where a mask is zero receive no gradient and are kept at zero.

    """
    masks = masks or {}
    state.step += 1
    out = {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = w
            continue
        if g.shape != w.shape:
            raise ValueError("Gradient shape %s does not match %s for %s" % (g.shape, w.shape, name))
        mask = masks.get(name)
        if mask is not None:
            g = np.where(mask != 0, g, 0.0)
        if state.kind == "sgd":
            new = w - state.lr * g
        else:
            m, v = state.moments.get(name, (np.zeros_like(w), np.zeros_like(w)))
            m = BETA1 * m + (1 - BETA1) * g
            v = BETA2 * v + (1 - BETA2) * g * g
            state.moments[name] = (m, v)
            mhat = m / (1 - BETA1**state.step)
            vhat = v / (1 - BETA2**state.step)
            new = w - state.lr * mhat / (np.sqrt(vhat) + EPSILON)
        if mask is not None:
            new = np.where(mask != 0, new, 0.0)
        out[name] = new
    return out
