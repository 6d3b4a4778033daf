"""Mask search over frozen weights with straight-through score updates."""

import dataclasses
import logging
import math
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, fgsm
from .functional import cross_entropy, kl_categorical, uniform
from .optim import OptimizerState, optimizer_step
from .pruning import PruningError, ScoreMap, build_mask

logger = logging.getLogger(__name__)

OBJECTIVES = ("ce", "aa", "ood", "ds")


class ObjectiveError(PruningError):
    """Raised when an objective lacks its auxiliary input."""

    pass


@dataclasses.dataclass
class ObjectiveAux:
    """Auxiliary inputs of the robustness objectives.

    ===========  =======================================================
    lam          Weight of the clean/adversarial KL term (``aa``)
    attack       Attack generating adversarial inputs (``aa``)
    ood_batch    Inputs pushed towards uniform predictions (``ood``)
    sigma        Standard deviation of input noise (``ds``)
    clamp        Interval noisy inputs are clamped to (``ds``)
    ===========  =======================================================

    """

    lam: float = 6.0
    attack: Optional[AttackSpec] = None
    ood_batch: Optional[np.ndarray] = None
    sigma: Optional[float] = None
    clamp: Tuple[float, float] = (0.0, 1.0)


def check_aux(kind, aux):
    if kind not in OBJECTIVES:
        raise ObjectiveError("Unknown objective %r" % (kind,))
    if kind == "aa" and (aux is None or aux.attack is None):
        raise ObjectiveError("Objective 'aa' needs an attack")
    if kind == "ood" and (aux is None or aux.ood_batch is None or not len(aux.ood_batch)):
        raise ObjectiveError("Objective 'ood' needs an OOD batch")
    if kind == "ds" and (aux is None or aux.sigma is None):
        raise ObjectiveError("Objective 'ds' needs a noise level")


def objective_loss(kind, model, x, y, aux=None, rng=None):
    """Training loss of a robustness objective.

    `model` is a callable mapping inputs to logits.

    """
    check_aux(kind, aux)
    if kind == "ds":
        rng = rng or np.random.default_rng(0)
        noisy = np.asarray(x) + aux.sigma * rng.standard_normal(np.shape(x))
        if aux.clamp is not None:
            noisy = np.clip(noisy, aux.clamp[0], aux.clamp[1])
        return cross_entropy(model(noisy), y)
    logits = model(x)
    loss = cross_entropy(logits, y)
    if kind == "aa":
        adversarial = fgsm(model, x, y, aux.attack)
        drift = kl_categorical(T.log_softmax(logits), T.log_softmax(model(adversarial)))
        loss = loss + drift * aux.lam
    elif kind == "ood":
        ood = np.asarray(aux.ood_batch)
        loss = loss + cross_entropy(model(ood), uniform(ood.shape[0], logits.shape[1]))
    return loss


def edge_popup(
    model,
    objective,
    sparsity,
    epochs,
    data,
    aux=None,
    scope="local",
    batch_size=128,
    lr=0.01,
    seed=0,
):
    """Learn a mask for the frozen weights of `model`.

    Every step keeps the top-scoring weights of each layer (or of the
    whole network with ``scope="global"``) and updates all scores by
    treating the selection as the identity in the backward pass.  The
    weights and existing masks of `model` are left untouched; the final
    mask is returned.

    """
    check_aux(objective, aux)
    rng = np.random.default_rng(seed)
    names = model.prunable
    scores = {}
    for name in names:
        shape = model.params[name].shape
        fan_in = int(np.prod(shape[1:]))
        scores[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    state = OptimizerState("adam", lr)
    base = model.effective(model.constants())
    ood = None if aux is None or aux.ood_batch is None else np.asarray(aux.ood_batch)
    for epoch in range(epochs):
        step_rng = np.random.default_rng([seed, epoch])
        for x, y in data.batches(batch_size, step_rng):
            leaves = {name: T.Tensor(scores[name], requires_grad=True) for name in names}
            mask = build_mask(ScoreMap(scores, "edge_popup"), sparsity, scope)
            weights = dict(base)
            for name in names:
                weights[name] = base[name] * T.select_through(leaves[name], mask[name])
            step_aux = aux
            if ood is not None and len(ood) > batch_size:
                pick = step_rng.choice(len(ood), batch_size, replace=False)
                step_aux = dataclasses.replace(aux, ood_batch=ood[pick])
            loss = objective_loss(
                objective, lambda inputs, w=weights: model.forward(inputs, w), x, y, step_aux, step_rng
            )
            grads = T.backward(loss, list(leaves.values()))
            scores = optimizer_step(state, scores, {name: grads[leaf] for name, leaf in leaves.items()})
        logger.info("Edge-popup epoch %d/%d: last loss %.4f", epoch + 1, epochs, loss.item())
    return build_mask(ScoreMap(scores, "edge_popup"), sparsity, scope)
