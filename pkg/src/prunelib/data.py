"""Datasets, synthetic generators, corruptions and augmentations."""

import collections
import dataclasses
import logging
import math
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from . import idx

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for inconsistent datasets or unsupported transformations."""

    pass


@dataclasses.dataclass
class Dataset:
    """Flattened inputs with optional integer labels.

    `image_shape` is the ``(channels, height, width)`` layout of one
    flattened row, if the inputs are images.

    """

    inputs: np.ndarray
    labels: Optional[np.ndarray] = None
    value_range: Tuple[float, float] = (0.0, 1.0)
    classes: Optional[int] = None
    image_shape: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            raise DataError("Inputs must have a sample axis")
        if self.inputs.ndim > 2:
            if self.image_shape is None and self.inputs.ndim == 4:
                self.image_shape = tuple(self.inputs.shape[1:])
            self.inputs = self.inputs.reshape(self.inputs.shape[0], -1)
        if self.image_shape is not None:
            self.image_shape = tuple(int(d) for d in self.image_shape)
            if int(np.prod(self.image_shape)) != self.inputs.shape[1]:
                raise DataError(
                    "Image shape %s does not match %d features" % (self.image_shape, self.inputs.shape[1])
                )
        lo, hi = self.value_range
        if self.inputs.size and (self.inputs.min() < lo or self.inputs.max() > hi):
            raise DataError("Inputs outside declared range [%g, %g]" % (lo, hi))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise DataError("Expected %d labels, got %s" % (self.inputs.shape[0], self.labels.shape))
            if self.classes is None:
                self.classes = int(self.labels.max()) + 1 if self.labels.size else 0
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
                raise DataError("Labels outside 0..%d" % (self.classes - 1))

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def features(self):
        return self.inputs.shape[1]

    def subset(self, index):
        index = np.asarray(index)
        return dataclasses.replace(
            self,
            inputs=self.inputs[index],
            labels=None if self.labels is None else self.labels[index],
        )

    def take(self, n):
        return self.subset(np.arange(min(n, len(self))))

    def batches(self, batch_size, rng=None, drop_last=False):
        """Yield ``(inputs, labels)`` batches, shuffled if `rng` is given."""
        if batch_size < 1:
            raise DataError("Batch size must be positive")
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        stop = len(self) - len(self) % batch_size if drop_last else len(self)
        for start in range(0, stop, batch_size):
            index = order[start : start + batch_size]
            yield self.inputs[index], None if self.labels is None else self.labels[index]


def load_dataset(images, labels=None, classes=None):
    """Build a dataset from IDX image and label files."""
    x = idx.load_idx(images)
    y = None if labels is None else idx.load_idx(labels, rescale=False).astype(np.int64)
    shape = (1,) + x.shape[1:] if x.ndim == 3 else None
    if x.size == 0 or (x.min() >= 0 and x.max() <= 1):
        lo, hi = 0.0, 1.0
    else:
        lo, hi = float(x.min()), float(x.max())
    return Dataset(x.reshape(x.shape[0], -1), y, (lo, hi), classes, shape)


def synth_blobs(n, classes, dims, separation, seed=0):
    """Gaussian clusters with unit variance and pairwise mean distance `separation`."""
    if classes < 2:
        raise DataError("At least two classes required")
    rng = np.random.default_rng(seed)
    if classes <= dims:
        means = np.eye(classes, dims) * (separation / math.sqrt(2.0))
    else:
        directions = rng.standard_normal((classes, dims))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        means = directions * (separation / math.sqrt(2.0))
    labels = rng.permutation(np.arange(n) % classes)
    inputs = means[labels] + rng.standard_normal((n, dims))
    lo, hi = (float(inputs.min()), float(inputs.max())) if n else (0.0, 0.0)
    return Dataset(inputs, labels, (lo, hi), classes)


def _smooth_unit(images, side):
    images = ndimage.gaussian_filter(images, sigma=(0, 0, side / 8.0, side / 8.0))
    lo = images.min(axis=(1, 2, 3), keepdims=True)
    hi = images.max(axis=(1, 2, 3), keepdims=True)
    return (images - lo) / np.maximum(hi - lo, 1e-12)


def synth_images(n, classes=10, side=28, channels=1, noise=0.1, spread=0.5, seed=0, draw=None):
    """Class prototypes blended with smooth distractors, in [0, 1].

    Every image mixes its class prototype with a smooth random image at
    weight `spread` and adds pixel noise of standard deviation `noise`.
    Prototypes depend on `seed` alone, so sets generated with the same
    `seed` and different `draw` share their classes.

    """
    if classes < 2:
        raise DataError("At least two classes required")
    if not 0.0 <= spread < 1.0:
        raise DataError("Spread must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    protos = _smooth_unit(rng.random((classes, channels, side, side)), side)
    if draw is not None:
        rng = np.random.default_rng([seed, draw])
    labels = rng.permutation(np.arange(n) % classes)
    distractors = _smooth_unit(rng.random((n, channels, side, side)), side)
    images = (1.0 - spread) * protos[labels] + spread * distractors
    images = np.clip(images + noise * rng.standard_normal(images.shape), 0.0, 1.0)
    return Dataset(images.reshape(n, -1), labels, (0.0, 1.0), classes, (channels, side, side))


def _require_unit_range(dataset):
    lo, hi = dataset.value_range
    if lo < 0.0 or hi > 1.0:
        raise DataError("Dataset must lie in [0, 1], declared [%g, %g]" % (lo, hi))


def make_oodom(dataset, scale=255.0):
    """The same samples on a different input scale."""
    _require_unit_range(dataset)
    lo, hi = dataset.value_range
    return dataclasses.replace(dataset, inputs=dataset.inputs * scale, value_range=(lo * scale, hi * scale))


class CorruptionSpec(collections.namedtuple("CorruptionSpec", "kind severity")):
    """A corruption kind with a severity between 1 and 5."""

    __slots__ = ()

    def __new__(cls, kind, severity):
        if kind not in SEVERITIES:
            raise DataError("Unknown corruption %r" % kind)
        if int(severity) != severity or not 1 <= severity <= 5:
            raise DataError("Severity must be an integer between 1 and 5")
        return super(CorruptionSpec, cls).__new__(cls, kind, int(severity))

    @property
    def parameter(self):
        return SEVERITIES[self.kind][self.severity - 1]


SEVERITIES = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),  # standard deviation
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),  # fraction of pixels
    "blur_boxfilter": (3, 5, 7, 9, 11),  # box side
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),  # factor around the image mean
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive shift
}


def _gaussian_noise(x, shape, sigma, rng):
    return x + sigma * rng.standard_normal(x.shape)


def _impulse_noise(x, shape, amount, rng):
    hit = rng.random(x.shape) < amount
    salt = rng.random(x.shape) < 0.5
    return np.where(hit, np.where(salt, 1.0, 0.0), x)


def _blur_boxfilter(x, shape, size, rng):
    if shape is None:
        raise DataError("Blur needs image-shaped inputs")
    images = x.reshape((-1,) + shape)
    return ndimage.uniform_filter(images, size=(1, 1, size, size), mode="nearest").reshape(x.shape)


def _contrast(x, shape, factor, rng):
    m = x.mean(axis=1, keepdims=True)
    return (x - m) * factor + m


def _brightness(x, shape, delta, rng):
    return x + delta


_CORRUPTIONS = {
    "gaussian_noise": _gaussian_noise,
    "impulse_noise": _impulse_noise,
    "blur_boxfilter": _blur_boxfilter,
    "contrast": _contrast,
    "brightness": _brightness,
}


def corrupt(dataset, spec, seed=0):
    """Apply a corruption at the given severity, clamping to [0, 1]."""
    _require_unit_range(dataset)
    try:
        fn = _CORRUPTIONS[spec.kind]
    except KeyError:
        raise DataError("Unknown corruption %r" % (spec.kind,))
    rng = np.random.default_rng(seed)
    x = fn(dataset.inputs, dataset.image_shape, spec.parameter, rng)
    return dataclasses.replace(dataset, inputs=np.clip(x, 0.0, 1.0), value_range=(0.0, 1.0))


def split_ood(dataset, holdout):
    """Split held-out classes off as an unlabeled OOD set."""
    holdout = set(int(c) for c in holdout)
    if dataset.labels is None:
        raise DataError("Dataset has no labels")
    if not holdout:
        raise DataError("Holdout classes must not be empty")
    if not holdout <= set(range(dataset.classes)):
        raise DataError("Holdout classes outside 0..%d" % (dataset.classes - 1))
    kept = [c for c in range(dataset.classes) if c not in holdout]
    if not kept:
        raise DataError("Holdout covers all classes")
    out = np.isin(dataset.labels, sorted(holdout))
    relabel = np.full(dataset.classes, -1, dtype=np.int64)
    relabel[kept] = np.arange(len(kept))
    inside = dataclasses.replace(
        dataset,
        inputs=dataset.inputs[~out],
        labels=relabel[dataset.labels[~out]],
        classes=len(kept),
    )
    ood = dataclasses.replace(dataset, inputs=dataset.inputs[out], labels=None, classes=None)
    logger.debug("Split %d in-distribution and %d OOD samples", len(inside), len(ood))
    return inside, ood


def _affine(image, rng):
    angle = rng.uniform(-15.0, 15.0)
    shift = rng.uniform(-2.0, 2.0, size=2)
    out = ndimage.rotate(image, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
    return ndimage.shift(out, (0.0, shift[0], shift[1]), order=1, mode="nearest")


_FIXED = (
    lambda im: np.rot90(im, 1, axes=(1, 2)),
    lambda im: np.rot90(im, 2, axes=(1, 2)),
    lambda im: np.rot90(im, 3, axes=(1, 2)),
    lambda im: im[:, :, ::-1],
    lambda im: im[:, ::-1, :],
)


def augment(sample, k, image_shape, seed=0):
    """Return `sample` followed by `k` augmented copies as a (k+1)-row batch.

    The first five copies are the quarter rotations and the two flips;
    further copies are random small rotations with translations.

    """
    if k < 0:
        raise DataError("Number of augmentations must not be negative")
    sample = np.asarray(sample, dtype=np.float64).reshape(-1)
    if k == 0:
        return sample[None]
    if image_shape is None:
        raise DataError("Augmentation needs image-shaped inputs")
    image = sample.reshape(image_shape)
    if image_shape[1] != image_shape[2]:
        raise DataError("Augmentation needs square images")
    rng = np.random.default_rng(seed)
    rows = [sample]
    for i in range(k):
        out = _FIXED[i](image) if i < len(_FIXED) else _affine(image, rng)
        rows.append(np.ascontiguousarray(out).reshape(-1))
    return np.stack(rows)
