"""Mini-batch training of networks and ensembles."""

import concurrent.futures
import dataclasses
import logging
import math
from typing import Optional

import numpy as np

from .functional import cross_entropy
from .models import Ensemble, kl_penalty, predict
from .optim import OptimizerState, optimizer_step
from .tensor import backward

logger = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    """Raised when a loss becomes NaN or infinite."""

    pass


@dataclasses.dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 2e-3
    optimizer: str = "adam"
    seed: int = 0
    kl_weight: Optional[float] = None


@dataclasses.dataclass
class RewindCheckpoint:
    """Parameters and optimizer state at the end of an epoch."""

    epoch: int
    params: dict
    optimizer: OptimizerState


class Trainer(object):
    """Trains a network on a labeled dataset.

    Batch order and weight noise for epoch ``e`` are drawn from a
    generator seeded with ``(seed, e)``, so resuming from a snapshot
    repeats the original run exactly.

    """

    def __init__(self, model, data, settings):
        if data.labels is None:
            raise ValueError("Training data needs labels")
        self.model = model
        self.data = data
        self.settings = settings
        self.state = OptimizerState(settings.optimizer, settings.lr)
        self.history = []

    @property
    def batches_per_epoch(self):
        return max(1, math.ceil(len(self.data) / self.settings.batch_size))

    def step(self, x, y, rng, batch=0):
        """One optimizer step; returns the loss and the number of correct predictions."""
        model = self.model
        leaves = model.leaves()
        if model.bayesian:
            kl_weight = self.settings.kl_weight
            if kl_weight is None:
                kl_weight = 1.0 / self.batches_per_epoch
            weights = model.effective(leaves, rng)
            logits = model.forward(x, weights)
            loss = cross_entropy(logits, y) + kl_penalty(model, leaves) * kl_weight
        else:
            logits = model.forward(x, model.effective(leaves))
            loss = cross_entropy(logits, y)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError("Loss is %r at epoch %d, batch %d" % (value, model.epochs_trained + 1, batch))
        grads = backward(loss, list(leaves.values()))
        model.params = optimizer_step(
            self.state,
            model.params,
            {name: grads[leaf] for name, leaf in leaves.items()},
            model.masks,
        )
        logger.debug("Batch %d: loss %.6f", batch, value)
        return value, int(np.count_nonzero(logits.data.argmax(axis=1) == y))

    def epoch(self):
        model = self.model
        rng = np.random.default_rng([self.settings.seed, model.epochs_trained])
        losses, correct = [], 0
        for i, (x, y) in enumerate(self.data.batches(self.settings.batch_size, rng)):
            loss, hits = self.step(x, y, rng, i)
            losses.append(loss)
            correct += hits
        model.epochs_trained += 1
        loss, accuracy = float(np.mean(losses)), correct / len(self.data)
        self.history.append((model.epochs_trained, loss, accuracy))
        logger.info("Epoch %d: loss %.4f, accuracy %.4f", model.epochs_trained, loss, accuracy)
        return loss

    def fit(self, epochs, callback=None):
        for _ in range(epochs):
            self.epoch()
            if callback is not None:
                callback(self)
        return self.model

    def snapshot(self):
        return RewindCheckpoint(
            self.model.epochs_trained,
            {k: v.copy() for k, v in self.model.params.items()},
            self.state.copy(),
        )

    def restore(self, checkpoint, mask=None):
        """Reset parameters and optimizer state, keeping `mask` applied."""
        model = self.model
        model.params = {k: v.copy() for k, v in checkpoint.params.items()}
        model.epochs_trained = checkpoint.epoch
        self.state = checkpoint.optimizer.copy()
        if mask is not None:
            model.apply_mask(mask)
        else:
            for name, m in model.masks.items():
                model.params[name] = np.where(m != 0, model.params[name], 0.0)


def train(model, data, settings, epochs=None):
    """Train `model` for `epochs` (default: the full budget) and return it."""
    trainer = Trainer(model, data, settings)
    return trainer.fit(settings.epochs if epochs is None else epochs)


def accuracy_on(model, data, batch_size=1024):
    correct = 0
    for x, y in data.batches(batch_size):
        correct += int(np.count_nonzero(predict(model, x).argmax(axis=1) == y))
    return correct / len(data)


def train_ensemble(spec, seeds, data, settings, workers=None, transform=None):
    """Train one member per seed on a thread pool.

    `transform` is applied to every freshly initialized member before
    training, e.g. to prune it; members it already trained only receive
    the rest of the epoch budget.

    """
    ensemble = Ensemble(spec, seeds)

    def run(member):
        member_settings = dataclasses.replace(settings, seed=member.spec.seed)
        if transform is not None:
            member = transform(member)
        remaining = max(0, settings.epochs - member.epochs_trained)
        return train(member, data, member_settings, remaining)

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        ensemble.members = list(pool.map(run, ensemble.members))
    return ensemble
