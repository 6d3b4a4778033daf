"""Experiment orchestration: data splits, training, pruning and evaluation.

A sweep trains one dense baseline per seed, then prunes and evaluates
every (method, sparsity, seed) combination on a bounded thread pool.
Every measurement becomes a :class:`RunRecord`; relative metrics
compare a pruned model with the dense model of the same seed, so that
values above 1 favor the pruned model.

"""

import collections
import concurrent.futures
import csv
import dataclasses
import hashlib
import logging
import math
import os
import threading
import time

import numpy as np

from . import checkpoint
from .attacks import AttackSpec, fgsm
from .config import ConfigError
from .data import (
    CorruptionSpec,
    DataError,
    Dataset,
    corrupt,
    load_dataset,
    make_oodom,
    split_ood,
    synth_images,
)
from .detection import (
    DetectionError,
    batch_msp,
    fit_profile,
    gradnorm_score,
    msp_score,
    sensnorm_score,
    sensnorm_single,
)
from .edgepopup import ObjectiveAux, edge_popup
from .idx import load_idx
from .metrics import (
    HIGH,
    LOW,
    MetricError,
    accuracy,
    aupr,
    auroc,
    brier,
    lipschitz_lower_bound,
    relative_metric,
)
from .models import Network, bayesian_predict, convs, ensemble_predict, mlp3, predict
from .pruning import PruneConfig, imp, prune, shrink_structured
from .train import Trainer, TrainSettings, train_ensemble

logger = logging.getLogger(__name__)

HIGHER_BETTER = ("accuracy", "auroc", "aupr")
LOWER_BETTER = ("brier", "lipschitz")

_CRITERIA = {
    "crop_s": "crop",
    "early_crop": "crop",
    "snip_after": "snip",
    "snr_s": "snr",
}

_SCHEDULES = {
    "early_crop": "during",
    "snip_after": "after",
    "magnitude": "after",
    "snr": "after",
    "snr_s": "after",
}


class HarnessError(RuntimeError):
    """Raised when a sweep cannot be assembled."""

    pass


class RunRecord(
    collections.namedtuple(
        "RunRecord",
        "run_id seed method sparsity metric dataset value wall_time_s",
    )
):
    """One measurement of a sweep.

    ===========  ===========================================
    run_id       Identifier of the sweep
    seed         Seed of the model
    method       Pruning method, ``dense`` for the baseline
    sparsity     Target sparsity
    metric       Metric name, ``rel_`` prefixed if relative
    dataset      ``clean``, an attack, ``ds``, ``ood`` or
                 ``oodom``
    value        Metric value
    wall_time_s  Seconds spent producing the model
    ===========  ===========================================

    """

    __slots__ = ()

    @property
    def key(self):
        return (self.run_id, self.seed, self.method, self.sparsity, self.metric, self.dataset)


class RecordStore(object):
    """Append-only record collection shared by sweep workers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records = {}

    def __len__(self):
        return len(self._records)

    def extend(self, records):
        with self._lock:
            for record in records:
                if record.key in self._records:
                    raise HarnessError("Duplicate record %s" % (record.key,))
                self._records[record.key] = record

    def records(self):
        with self._lock:
            records = list(self._records.values())
        return sorted(records, key=lambda r: (r.method, r.sparsity, r.seed, r.metric, r.dataset))


Splits = collections.namedtuple("Splits", "train test ood ood_train")


def _synthetic(config, size, draw):
    d = config.data
    classes = 10
    kept = classes - len(set(d.holdout))
    n = int(math.ceil(size * classes / max(kept, 1)))
    return synth_images(n, classes, side=d.side, noise=d.noise, spread=d.spread, seed=0, draw=draw)


def load_splits(config):
    """Training, test and OOD sets as configured.

    Without dataset paths, synthetic images stand in for the files.

    """
    d = config.data
    if d.synthetic:
        train, test = _synthetic(config, d.train_size, 0), _synthetic(config, d.test_size, 1)
    else:
        train = load_dataset(d.train_images, d.train_labels)
        test = load_dataset(d.test_images, d.test_labels, classes=train.classes)
    train, ood_train = split_ood(train, d.holdout)
    test, ood = split_ood(test, d.holdout)
    if d.ood_images is not None:
        x = load_idx(d.ood_images)
        ood = Dataset(x.reshape(x.shape[0], -1), image_shape=test.image_shape)
    train, test = train.take(d.train_size), test.take(d.test_size)
    ood = ood.take(d.test_size)
    if not len(train) or not len(test) or not len(ood):
        raise DataError("Empty split")
    logger.info("Loaded %d training, %d test and %d OOD samples", len(train), len(test), len(ood))
    return Splits(train, test, ood, ood_train)


def model_spec(config, seed, data):
    m = config.model
    if m.arch == "convs":
        if data.image_shape is None:
            raise ConfigError("Convolutional models need image inputs")
        return convs(data.image_shape, data.classes, seed, m.channels, bayesian=m.bayesian)
    return mlp3(data.features, data.classes, seed, m.hidden, m.bayesian)


def train_settings(config, seed):
    t = config.train
    return TrainSettings(t.epochs, t.batch_size, t.lr, t.optimizer, seed)


def rewind_epoch(config):
    if config.train.rewind_epoch is not None:
        return config.train.rewind_epoch
    return min(1, config.train.epochs)


def train_dense(config, seed, splits, out=None):
    """Train the dense baseline of one seed.

    With `out` set, the model, its rewind snapshot and the per-epoch
    history are written there.

    """
    model = Network(model_spec(config, seed, splits.train))
    trainer = Trainer(model, splits.train, train_settings(config, seed))
    rewind = config.train.rewind_epoch

    def snapshot(t):
        if out is not None and rewind is not None and t.model.epochs_trained == rewind:
            rewound = t.model.copy()
            rewound.params = t.snapshot().params
            checkpoint.save(rewound, os.path.join(out, "rewind-seed%d.spnn" % seed), [seed])

    snapshot(trainer)
    trainer.fit(config.train.epochs, snapshot)
    if out is not None:
        checkpoint.save(model, os.path.join(out, "dense-seed%d.spnn" % seed), [seed])
        with open(os.path.join(out, "history-seed%d.csv" % seed), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(("epoch", "loss", "accuracy"))
            writer.writerows(trainer.history)
    return model


def probabilities(model, x, config, seed=0):
    if model.bayesian:
        return bayesian_predict(model, x, config.model.inferences, seed)
    return predict(model, x)


def _attack(model, data, spec, chunk=500):
    parts = []
    for start in range(0, len(data), chunk):
        stop = start + chunk
        parts.append(fgsm(model, data.inputs[start:stop], data.labels[start:stop], spec))
    return np.concatenate(parts)


def evaluate(model, splits, config, seed=0):
    """All metrics of one model, keyed by ``(metric, dataset)``."""
    test = splits.test
    probs = probabilities(model, test.inputs, config, seed)
    clean = msp_score(probs)
    out = {
        ("accuracy", "clean"): accuracy(probs, test.labels),
        ("brier", "clean"): brier(probs, test.labels),
        ("sparsity_realized", "clean"): model.sparsity(),
    }

    def shifted(name, inputs, labels=None):
        p = probabilities(model, inputs, config, seed)
        if labels is not None:
            out[("accuracy", name)] = accuracy(p, labels)
        out[("auroc", name)] = auroc(clean, msp_score(p), LOW)
        out[("aupr", name)] = aupr(clean, msp_score(p), LOW)

    for norm in config.attack.norms:
        spec = AttackSpec.from_pixels(norm, config.attack.epsilon)
        shifted("fgsm_" + norm, _attack(model, test, spec), test.labels)
    ds = corrupt(test, CorruptionSpec(config.data.corruption, config.data.severity), seed)
    shifted("ds", ds.inputs, ds.labels)
    shifted("ood", splits.ood.inputs)
    shifted("oodom", make_oodom(splits.ood).inputs)
    samples = test.inputs[: config.detect.lipschitz_samples]
    iterations = config.detect.lipschitz_iterations
    out[("lipschitz", "clean")] = lipschitz_lower_bound(model, samples, iterations, seed)
    return out


def relative(metrics, dense):
    """Relative versions of every comparable metric."""
    out = {}
    for (metric, dataset), value in metrics.items():
        if metric in HIGHER_BETTER:
            kind = "higher_better"
        elif metric in LOWER_BETTER:
            kind = "lower_better"
        else:
            continue
        base = dense.get((metric, dataset))
        if base is None:
            continue
        try:
            out[("rel_" + metric, dataset)] = relative_metric(value, base, kind)
        except MetricError as e:
            logger.warning("rel_%s on %s undefined: %s", metric, dataset, e)
            out[("rel_" + metric, dataset)] = float("nan")
    return out


def _aux(method, config, splits, seed):
    if method.objective == "aa":
        return ObjectiveAux(config.prune.lam, attack=AttackSpec.from_pixels("linf", config.attack.epsilon))
    if method.objective == "ood":
        return ObjectiveAux(ood_batch=splits.ood_train.inputs)
    if method.objective == "ds":
        return ObjectiveAux(sigma=config.prune.sigma)
    return None


def run_method(method, sparsity, seed, config, splits, dense):
    """Produce the pruned model of one sweep point."""
    settings = train_settings(config, seed)
    spec = model_spec(config, seed, splits.train)
    name = method.name
    if name == "imp":
        per_cycle = 1.0 - (1.0 - sparsity) ** (1.0 / method.cycles)
        model, _ = imp(spec, splits.train, settings, method.cycles, per_cycle, rewind_epoch(config))
        return model
    if name.startswith("edge_popup"):
        model = dense.copy() if name == "edge_popup_after" else Network(spec)
        mask = edge_popup(
            model,
            method.objective,
            sparsity,
            config.train.epochs if method.edge_epochs is None else method.edge_epochs,
            splits.train,
            _aux(method, config, splits, seed),
            scope=method.scope or "local",
            batch_size=config.train.batch_size,
            lr=config.prune.edge_lr,
            seed=seed,
        )
        model.apply_mask(mask)
        return model
    schedule = method.schedule or _SCHEDULES.get(name, "before")
    prune_config = PruneConfig(
        criterion=_CRITERIA.get(name, name),
        sparsity=sparsity,
        scope=method.scope or "global",
        granularity="structured" if name.endswith("_s") else "unstructured",
        schedule=schedule,
        epoch=method.epoch,
        score_batches=method.score_batches,
        finetune_epochs=method.finetune_epochs,
    )
    model = dense.copy() if schedule == "after" else Network(spec)
    model, _ = prune(model, prune_config, splits.train, settings)
    return model


def _rows(run_id, seed, method, sparsity, metrics, wall):
    return [
        RunRecord(run_id, seed, method, float(sparsity), metric, dataset, float(value), wall)
        for (metric, dataset), value in sorted(metrics.items())
    ]


def run_id(config):
    digest = hashlib.sha1(config.model_dump_json(exclude={"out", "report"}).encode("utf-8"))
    return digest.hexdigest()[:12]


def train_baselines(config, splits, out=None):
    """Dense model and metrics of every seed, keyed by seed."""

    def run(seed):
        model = train_dense(config, seed, splits, out)
        return seed, (model, evaluate(model, splits, config, seed))

    with concurrent.futures.ThreadPoolExecutor(max_workers=config.report.workers) as pool:
        return dict(pool.map(run, config.seeds))


def sweep(config, splits=None, baselines=None):
    """Evaluate every method, sparsity and seed against the dense baselines.

    Returns one row per seed; :func:`prunelib.report.aggregate` averages
    them over seeds.  Ensemble rows are appended when the configuration
    enables them.

    """
    splits = splits or load_splits(config)
    if baselines is None:
        baselines = train_baselines(config, splits)
    for seed in config.seeds:
        if seed not in baselines:
            raise HarnessError("Missing dense baseline for seed %d" % seed)
    rid = run_id(config)
    store = RecordStore()
    for seed in config.seeds:
        _, dense = baselines[seed]
        store.extend(_rows(rid, seed, "dense", 0.0, {**dense, **relative(dense, dense)}, 0.0))

    def job(method, sparsity, seed):
        model, dense = baselines[seed]
        start = time.perf_counter()
        pruned = run_method(method, sparsity, seed, config, splits, model)
        wall = time.perf_counter() - start if config.report.wall_time else 0.0
        metrics = evaluate(pruned, splits, config, seed)
        metrics.update(relative(metrics, dense))
        store.extend(_rows(rid, seed, method.label, sparsity, metrics, wall))
        logger.info("Finished %s at sparsity %g, seed %d", method.label, sparsity, seed)

    section = config.prune
    jobs = [(m, s, seed) for m in section.methods for s in section.sparsities for seed in config.seeds]
    logger.info("Running %d sweep points on %d workers", len(jobs), config.report.workers)
    with concurrent.futures.ThreadPoolExecutor(max_workers=config.report.workers) as pool:
        for future in [pool.submit(job, *j) for j in jobs]:
            future.result()
    if config.ensemble.sweep:
        store.extend(ensemble_sweep(config, splits))
    return store.records()


def ensemble_seeds(config, seed):
    """Member seeds of the ensemble that belongs to `seed`."""
    n = config.ensemble.members
    return [seed * n + i for i in range(n)]


def evaluate_ensemble(ensemble, splits, config, seed=0):
    """Clean, shifted and OOD metrics of the averaged member predictions."""
    test = splits.test
    probs = ensemble_predict(ensemble, test.inputs)
    clean = msp_score(probs)
    out = {
        ("accuracy", "clean"): accuracy(probs, test.labels),
        ("brier", "clean"): brier(probs, test.labels),
    }
    ds = corrupt(test, CorruptionSpec(config.data.corruption, config.data.severity), seed)
    for name, inputs, labels in (
        ("ds", ds.inputs, ds.labels),
        ("ood", splits.ood.inputs, None),
        ("oodom", make_oodom(splits.ood).inputs, None),
    ):
        p = ensemble_predict(ensemble, inputs)
        if labels is not None:
            out[("accuracy", name)] = accuracy(p, labels)
        out[("auroc", name)] = auroc(clean, msp_score(p), LOW)
        out[("aupr", name)] = aupr(clean, msp_score(p), LOW)
    return out


def _shrunk_ensemble(spec, seeds, sparsity, data, settings, workers):
    masks = {}
    prune_config = PruneConfig(criterion="crop", sparsity=sparsity, scope="local", granularity="structured")

    def transform(member):
        member_settings = dataclasses.replace(settings, seed=member.spec.seed)
        pruned, mask = prune(member, prune_config, data, member_settings)
        masks[pruned.spec.seed] = mask
        return pruned

    ensemble = train_ensemble(spec, seeds, data, settings, workers, transform)
    ensemble.members = [shrink_structured(m, masks[s]) for m, s in zip(ensemble, ensemble.seeds)]
    return ensemble


def ensemble_sweep(config, splits=None):
    """Dense and structurally pruned ensembles of every seed.

    Members of the pruned ensembles are pruned with ``crop_s`` before
    training and physically shrunk afterwards.  Every ensemble reports
    ``param_ratio``, its parameter count over that of the dense
    ensemble of the same seed.

    """
    splits = splits or load_splits(config)
    rid = run_id(config)
    store = RecordStore()
    workers = config.report.workers
    for seed in config.seeds:
        seeds = ensemble_seeds(config, seed)
        spec = model_spec(config, seed, splits.train)
        settings = train_settings(config, seed)
        start = time.perf_counter()
        dense = train_ensemble(spec, seeds, splits.train, settings, workers)
        wall = time.perf_counter() - start if config.report.wall_time else 0.0
        base = evaluate_ensemble(dense, splits, config, seed)
        size = sum(m.parameter_count() for m in dense)
        base[("param_ratio", "clean")] = 1.0
        store.extend(_rows(rid, seed, "ensemble", 0.0, {**base, **relative(base, base)}, wall))
        for sparsity in config.ensemble.sparsities:
            start = time.perf_counter()
            ensemble = _shrunk_ensemble(spec, seeds, sparsity, splits.train, settings, workers)
            wall = time.perf_counter() - start if config.report.wall_time else 0.0
            metrics = evaluate_ensemble(ensemble, splits, config, seed)
            metrics[("param_ratio", "clean")] = sum(m.parameter_count() for m in ensemble) / size
            metrics.update(relative(metrics, base))
            store.extend(_rows(rid, seed, "ensemble_crop_s", sparsity, metrics, wall))
            logger.info(
                "Ensemble of %d at sparsity %g, seed %d: %.4f of the dense parameters",
                len(ensemble),
                sparsity,
                seed,
                metrics[("param_ratio", "clean")],
            )
    return store.records()


DETECTORS = ("sensnorm", "msp", "gradnorm")


def _chunks(inputs, size, limit):
    count = min(len(inputs) // size, limit)
    return [inputs[i * size : (i + 1) * size] for i in range(count)]


def detection_auroc(model, splits, config, detector, batch_size, seed=0, limit=100):
    """Batch-level AUROC of a detector against the OOD and OODom sets.

    Test, OOD and OODom inputs are cut into at most `limit` batches of
    `batch_size`.  SensNorm on single samples scores each sample
    together with its augmented copies.

    """
    d = config.detect
    if detector == "sensnorm":
        orientation = HIGH
        if batch_size == 1 and d.augmentations:
            profile = fit_profile(
                model,
                splits.train,
                d.augmentations + 1,
                d.p,
                d.sigma_floor,
                d.test_loss,
                d.augmentations,
                seed,
                d.profile_batches,
            )

            def score(batch):
                return sensnorm_single(model, profile, batch[0], d.augmentations, seed)

        else:
            profile = fit_profile(
                model, splits.train, batch_size, d.p, d.sigma_floor, d.test_loss, limit=d.profile_batches
            )

            def score(batch):
                return sensnorm_score(model, profile, batch)

    elif detector == "msp":
        orientation = LOW

        def score(batch):
            return batch_msp(probabilities(model, batch, config, seed))

    elif detector == "gradnorm":
        orientation = LOW

        def score(batch):
            return gradnorm_score(model, batch)

    else:
        raise DetectionError("Unknown detector %r" % (detector,))
    inside = [score(b) for b in _chunks(splits.test.inputs, batch_size, limit)]
    out = {}
    for name, inputs in (("ood", splits.ood.inputs), ("oodom", make_oodom(splits.ood).inputs)):
        out[name] = auroc(inside, [score(b) for b in _chunks(inputs, batch_size, limit)], orientation)
        logger.info("%s at batch size %d on %s: AUROC %.4f", detector, batch_size, name, out[name])
    return out
