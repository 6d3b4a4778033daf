"""Weight scoring, mask construction and pruning schedules.

Masks keep the highest-scoring weights.  Criteria are:

=========  =============================================
magnitude  ``|w|``
snip       ``|w * dL/dw|``
crop       ``|w * (H dL/dw)|``, preserving gradient flow
grasp      ``-|w * (H dL/dw)|``
snr        ``|mu / sigma|`` of a Gaussian posterior
=========  =============================================

Gradients and Hessian-gradient products are averaged over the score
batches before applying the formula.  Weights that are already masked
out score ``-inf``.

"""

import dataclasses
import logging
import math
from typing import Optional

import numpy as np

from . import tensor as T
from .functional import cross_entropy
from .models import Network
from .train import RewindCheckpoint, Trainer

logger = logging.getLogger(__name__)

__all__ = [
    "CRITERIA",
    "Mask",
    "PruneConfig",
    "PruningError",
    "RewindCheckpoint",
    "ScoreMap",
    "build_mask",
    "compute_scores",
    "imp",
    "kept_count",
    "prune",
    "shrink_structured",
    "structure_scores",
]

CRITERIA = ("magnitude", "snip", "grasp", "crop", "snr")
SCOPES = ("global", "local")
GRANULARITIES = ("unstructured", "structured")
SCHEDULES = ("before", "during", "after")

DEFAULT_SCORE_BATCHES = 10


class PruningError(ValueError):
    """The base class of all pruning errors."""

    pass


class ScoreMap(dict):
    """Score arrays keyed by weight name."""

    def __init__(self, scores=(), criterion=None, granularity="unstructured"):
        dict.__init__(self, scores)
        self.criterion = criterion
        self.granularity = granularity


class Mask(dict):
    """Binary arrays keyed by parameter name.

    Structured masks also carry the bias entries of pruned units.

    """

    def __init__(self, masks=(), granularity="unstructured"):
        dict.__init__(self, masks)
        self.granularity = granularity

    @property
    def weights(self):
        return [name for name in self if name.endswith(".weight")]

    def sparsity(self):
        total = sum(self[name].size for name in self.weights)
        kept = sum(int(np.count_nonzero(self[name])) for name in self.weights)
        return 1.0 - kept / total if total else 0.0


@dataclasses.dataclass
class PruneConfig:
    criterion: str = "snip"
    sparsity: float = 0.9
    scope: str = "global"
    granularity: str = "unstructured"
    schedule: str = "before"
    epoch: int = 0
    score_batches: Optional[int] = None
    finetune_epochs: int = 0

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise PruningError("Unknown criterion %r" % self.criterion)
        if self.scope not in SCOPES:
            raise PruningError("Unknown scope %r" % self.scope)
        if self.granularity not in GRANULARITIES:
            raise PruningError("Unknown granularity %r" % self.granularity)
        if self.schedule not in SCHEDULES:
            raise PruningError("Unknown schedule %r" % self.schedule)
        _check_sparsity(self.sparsity)
        if self.epoch < 0 or self.finetune_epochs < 0:
            raise PruningError("Epoch counts must not be negative")


def _check_sparsity(sparsity):
    if not 0.0 <= sparsity < 1.0:
        raise PruningError("Sparsity %r outside [0, 1)" % (sparsity,))


def kept_count(total, sparsity):
    """Number of entries kept at `sparsity`, rounded up."""
    return int(math.ceil(round((1.0 - sparsity) * total, 9)))


def _batch_loss(model, batches):
    def loss(tensors):
        weights = model.effective(dict(zip(model.means, tensors)))
        total = 0.0
        for x, y in batches:
            total = cross_entropy(model.forward(x, weights), y) + total
        return total * (1.0 / len(batches))

    return loss


def compute_scores(model, batches, criterion):
    """Score every prunable weight of `model`."""
    if criterion not in CRITERIA:
        raise PruningError("Unknown criterion %r" % criterion)
    names = model.prunable
    if criterion == "magnitude":
        scores = {name: np.abs(model.params[name]) for name in names}
    elif criterion == "snr":
        if not model.bayesian:
            raise PruningError("snr needs a Bayesian model")
        scores = {
            name: np.abs(model.params[name] / np.logaddexp(0.0, model.params[name + "_rho"]))
            for name in names
        }
    else:
        batches = list(batches)
        if not batches:
            raise PruningError("%s needs at least one score batch" % criterion)
        means = [model.params[name] for name in model.means]
        loss = _batch_loss(model, batches)
        _, grads = T.gradient(loss, means)
        if criterion == "snip":
            products = grads
        else:
            products = T.hvp(loss, means, grads)
        products = dict(zip(model.means, products))
        scores = {name: np.abs(model.params[name] * products[name]) for name in names}
        if criterion == "grasp":
            scores = {name: -s for name, s in scores.items()}
    for name in names:
        scores[name] = np.where(model.masks[name] != 0, scores[name], -np.inf)
    logger.debug("Computed %s scores for %d tensors", criterion, len(names))
    return ScoreMap(scores, criterion)


def structure_scores(scores, model):
    """Sum scores per output unit, excluding the output layer.

    Masked-out weights do not contribute; a unit whose weights are all
    masked out scores ``-inf``.

    """
    out = ScoreMap(criterion=scores.criterion, granularity="structured")
    final = "%d.weight" % model.final_layer
    for name, s in scores.items():
        if name == final:
            continue
        index = int(name.split(".")[0])
        if model.spec.layers[index].kind not in ("dense", "conv"):
            raise PruningError("Cannot group %s by output unit" % name)
        rows = s.reshape(s.shape[0], -1)
        finite = np.isfinite(rows)
        unit = np.where(finite, rows, 0.0).sum(axis=1)
        unit = np.where(finite.any(axis=1), unit, -np.inf)
        out[name] = np.broadcast_to(unit.reshape((-1,) + (1,) * (s.ndim - 1)), s.shape).copy()
    if not out:
        raise PruningError("Model has no hidden units to prune")
    return out


def _unit_scores(s, structured):
    return s.reshape(s.shape[0], -1)[:, 0] if structured else s.reshape(-1)


def _top(values, k):
    order = np.argsort(-values, kind="stable")
    keep = np.zeros(values.shape[0], dtype=bool)
    keep[order[:k]] = True
    if 0 < k < values.shape[0]:
        boundary = values[order[k - 1]]
        if boundary == values[order[k]]:
            logger.debug("Tie at selection boundary, score %g", boundary)
        if not np.isfinite(boundary):
            logger.warning("Selecting previously pruned entries to reach the kept count")
    return keep


def build_mask(scores, sparsity, scope="global"):
    """Keep the top-scoring entries, globally or per layer.

    Ties are broken by layer order, then flat index.

    """
    _check_sparsity(sparsity)
    if scope not in SCOPES:
        raise PruningError("Unknown scope %r" % scope)
    structured = scores.granularity == "structured"
    names = list(scores)
    units = [_unit_scores(scores[name], structured) for name in names]
    if scope == "global":
        values = np.concatenate(units) if units else np.zeros(0)
        keep = _top(values, kept_count(values.size, sparsity))
        keeps = np.split(keep, np.cumsum([u.size for u in units])[:-1])
    else:
        keeps = [_top(u, kept_count(u.size, sparsity)) for u in units]
    mask = Mask(granularity=scores.granularity)
    for name, keep in zip(names, keeps):
        shape = scores[name].shape
        if structured:
            rows = keep.astype(np.float64)
            mask[name] = np.broadcast_to(rows.reshape((-1,) + (1,) * (len(shape) - 1)), shape).copy()
            mask[name[: -len("weight")] + "bias"] = rows.copy()
        else:
            mask[name] = keep.reshape(shape).astype(np.float64)
    logger.debug("Built %s %s mask at sparsity %g", scope, scores.granularity, sparsity)
    return mask


def _score_batches(data, settings, count):
    rng = np.random.default_rng([settings.seed, 1 << 20])
    batches = []
    for batch in data.batches(settings.batch_size, rng):
        if count is not None and len(batches) == count:
            break
        batches.append(batch)
    return batches


def prune(model, config, data, settings, trainer=None):
    """Prune `model` on its schedule and train for the rest of the budget.

    ``before`` needs an untrained model; ``during`` trains up to
    `config.epoch` first; ``after`` prunes a trained model and fine-tunes
    for `config.finetune_epochs`.

    """
    trainer = trainer or Trainer(model, data, settings)
    if config.schedule == "before" and model.epochs_trained:
        raise PruningError("Schedule 'before' needs an untrained model, got %d epochs" % model.epochs_trained)
    if config.schedule == "during":
        if config.epoch > settings.epochs:
            raise PruningError("Pruning epoch %d beyond %d training epochs" % (config.epoch, settings.epochs))
        if model.epochs_trained > config.epoch:
            raise PruningError("Model already trained past epoch %d" % config.epoch)
        trainer.fit(config.epoch - model.epochs_trained)
    if config.schedule == "after" and not model.epochs_trained:
        raise PruningError("Schedule 'after' needs a trained model")
    count = config.score_batches
    if count is None and config.schedule != "after":
        count = DEFAULT_SCORE_BATCHES
    needs_batches = config.criterion not in ("magnitude", "snr")
    batches = _score_batches(data, settings, count) if needs_batches else ()
    scores = compute_scores(model, batches, config.criterion)
    if config.granularity == "structured":
        scores = structure_scores(scores, model)
    mask = build_mask(scores, config.sparsity, config.scope)
    model.apply_mask(mask)
    logger.info(
        "Pruned with %s (%s, %s) at epoch %d: sparsity %.4f",
        config.criterion,
        config.scope,
        config.granularity,
        model.epochs_trained,
        model.sparsity(),
    )
    if config.schedule == "after":
        trainer.fit(config.finetune_epochs)
    else:
        trainer.fit(max(0, settings.epochs - model.epochs_trained))
    return model, mask


def imp(spec, data, settings, cycles, sparsity, rewind_epoch, on_rewind=None):
    """Iterative magnitude pruning with rewinding.

    The network is trained, then each cycle prunes to cumulative
    sparsity ``1 - (1 - sparsity) ** cycle``, restores the surviving
    weights and optimizer state to their `rewind_epoch` values and
    retrains.

    """
    if cycles < 1:
        raise PruningError("At least one cycle required")
    _check_sparsity(sparsity)
    if not 0 <= rewind_epoch <= settings.epochs:
        raise PruningError("Rewind epoch %d outside the first %d epochs" % (rewind_epoch, settings.epochs))
    model = Network(spec)
    trainer = Trainer(model, data, settings)
    found = {}

    def keep(t):
        if t.model.epochs_trained == rewind_epoch:
            found["checkpoint"] = t.snapshot()

    keep(trainer)
    trainer.fit(settings.epochs, keep)
    checkpoint = found.get("checkpoint")
    if checkpoint is None:
        raise PruningError("Rewind checkpoint for epoch %d missing" % rewind_epoch)
    mask = Mask({name: np.ones_like(model.masks[name]) for name in model.prunable})
    for cycle in range(1, cycles + 1):
        target = 1.0 - (1.0 - sparsity) ** cycle
        mask = build_mask(compute_scores(model, (), "magnitude"), target, "global")
        trainer.restore(checkpoint, mask)
        if on_rewind is not None:
            on_rewind(model, checkpoint, mask)
        logger.info(
            "IMP cycle %d/%d: sparsity %.4f, rewound to epoch %d",
            cycle,
            cycles,
            model.sparsity(),
            rewind_epoch,
        )
        trainer.fit(settings.epochs - rewind_epoch)
    return model, mask


def shrink_structured(model, mask):
    """Physically remove the units a structured mask prunes."""
    if mask.granularity != "structured":
        raise PruningError("Shrinking needs a structured mask")
    spec = model.spec
    layers = list(spec.layers)
    params, masks = {}, {}
    selected = None
    for i, layer in enumerate(spec.layers):
        if layer.kind == "flatten" and selected is not None:
            c, h, w = model.shapes[i - 1]
            selected = (selected[:, None] * (h * w) + np.arange(h * w)).reshape(-1)
            continue
        if layer.kind not in ("dense", "conv"):
            continue
        weight, bias = "%d.weight" % i, "%d.bias" % i
        rows = np.arange(layer.fan_out)
        if weight in mask:
            rows = np.flatnonzero(mask[weight].reshape(layer.fan_out, -1).any(axis=1))
            if not rows.size:
                raise PruningError("Layer %d lost all units" % i)
        cols = np.arange(layer.fan_in) if selected is None else selected
        for name in (weight, bias):
            for key in (name, name + "_rho"):
                if key in model.params:
                    p = model.params[key][rows]
                    params[key] = p[:, cols] if name == weight else p
            m = model.masks[name][rows]
            masks[name] = m[:, cols] if name == weight else m
        layers[i] = layer._replace(fan_in=int(cols.size), fan_out=int(rows.size))
        selected = rows
    shrunk = Network(spec._replace(layers=tuple(layers)))
    shrunk.params = params
    shrunk.masks = masks
    shrunk.epochs_trained = model.epochs_trained
    logger.info("Shrunk network from %d to %d parameters", model.parameter_count(), shrunk.parameter_count())
    return shrunk
