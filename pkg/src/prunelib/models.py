"""Feed-forward classifiers with per-weight masks."""

import collections
import copy
import logging
import math

import numpy as np

from . import tensor as T
from .functional import cross_entropy

logger = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "conv", "pool", "relu", "flatten")

RHO_INIT = math.log(math.expm1(0.05))


class SpecError(ValueError):
    """Raised when a model specification is inconsistent."""

    pass


class LayerSpec(
    collections.namedtuple("LayerSpec", "kind fan_in fan_out kernel", defaults=(None, None, None))
):
    """A single layer of a model specification.

    ========  =============================================
    kind      One of ``dense``, ``conv``, ``pool``, ``relu``
              or ``flatten``
    fan_in    Input features (dense) or channels (conv)
    fan_out   Output features (dense) or channels (conv)
    kernel    Odd kernel side length (conv only)
    ========  =============================================

    """

    __slots__ = ()


class ModelSpec(
    collections.namedtuple(
        "ModelSpec",
        "layers classes seed input_shape bayesian",
        defaults=(0, None, False),
    )
):
    """An ordered list of layers plus class count and init seed.

    ===========  ===========================================
    layers       Tuple of :class:`LayerSpec`
    classes      Number of output classes
    seed         Initialization seed
    input_shape  Shape of one sample, ``(features,)`` or
                 ``(channels, height, width)``
    bayesian     Whether weights are Gaussian variational
                 posteriors
    ===========  ===========================================

    """

    __slots__ = ()

    def to_dict(self):
        return {
            "layers": [layer._asdict() for layer in self.layers],
            "classes": self.classes,
            "seed": self.seed,
            "input_shape": list(self.input_shape),
            "bayesian": self.bayesian,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                tuple(LayerSpec(**layer) for layer in d["layers"]),
                int(d["classes"]),
                int(d["seed"]),
                tuple(int(n) for n in d["input_shape"]),
                bool(d["bayesian"]),
            )
        except (KeyError, TypeError) as e:
            raise SpecError("Malformed model specification: %s" % e)


def _name(i, layers):
    return "input" if i < 0 else "layer %d (%s)" % (i, layers[i].kind)


def check_spec(spec):
    """Return the output shape of every layer, validating composition."""
    if spec.classes is None or spec.classes < 2:
        raise SpecError("At least two classes required")
    if not spec.layers:
        raise SpecError("Model has no layers")
    if spec.input_shape is None:
        raise SpecError("Input shape missing")
    shape = tuple(spec.input_shape)
    shapes = []
    for i, layer in enumerate(spec.layers):
        where = "%s -> %s" % (_name(i - 1, spec.layers), _name(i, spec.layers))
        if layer.kind not in LAYER_KINDS:
            raise SpecError("%s: unknown layer kind" % where)
        if layer.kind in ("dense", "conv"):
            if not (layer.fan_in and layer.fan_out and layer.fan_in > 0 and layer.fan_out > 0):
                raise SpecError("%s: dimensions must be positive" % where)
        if layer.kind == "dense":
            if len(shape) != 1 or shape[0] != layer.fan_in:
                raise SpecError("%s: expected %d input features, got shape %s" % (where, layer.fan_in, shape))
            shape = (layer.fan_out,)
        elif layer.kind == "conv":
            if len(shape) != 3 or shape[0] != layer.fan_in:
                raise SpecError("%s: expected %d input channels, got shape %s" % (where, layer.fan_in, shape))
            if not layer.kernel or layer.kernel < 1 or layer.kernel % 2 == 0:
                raise SpecError("%s: kernel must be odd and positive" % where)
            shape = (layer.fan_out,) + shape[1:]
        elif layer.kind == "pool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise SpecError("%s: pooling needs even spatial dimensions, got shape %s" % (where, shape))
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
    if shape != (spec.classes,):
        raise SpecError(
            "%s -> output: produces shape %s, expected (%d,)"
            % (_name(len(spec.layers) - 1, spec.layers), shape, spec.classes)
        )
    return shapes


class Network(object):
    """A feed-forward classifier built from a :class:`ModelSpec`.

    Parameters are stored by name, ``"<layer>.weight"`` and
    ``"<layer>.bias"``, with ``"<name>_rho"`` companions holding the
    softplus-parameterized standard deviations of Bayesian models.
    Every weight and bias has a binary mask of the same shape.

    """

    def __init__(self, spec):
        self.spec = spec
        self.shapes = check_spec(spec)
        self.params = {}
        self.masks = {}
        self.epochs_trained = 0
        rng = np.random.default_rng(spec.seed)
        for i, layer in enumerate(spec.layers):
            if layer.kind == "dense":
                shape, fan = (layer.fan_out, layer.fan_in), layer.fan_in
            elif layer.kind == "conv":
                shape = (layer.fan_out, layer.fan_in, layer.kernel, layer.kernel)
                fan = layer.fan_in * layer.kernel * layer.kernel
            else:
                continue
            self.params["%d.weight" % i] = rng.normal(0.0, math.sqrt(2.0 / fan), shape)
            self.params["%d.bias" % i] = np.zeros(layer.fan_out)
        for name in list(self.params):
            self.masks[name] = np.ones_like(self.params[name])
            if spec.bayesian:
                self.params[name + "_rho"] = np.full_like(self.params[name], RHO_INIT)

    def __repr__(self):
        return "Network(%d layers, %d parameters, sparsity=%.3f)" % (
            len(self.spec.layers),
            self.parameter_count(),
            self.sparsity(),
        )

    @property
    def bayesian(self):
        return self.spec.bayesian

    @property
    def layer_indices(self):
        return [i for i, layer in enumerate(self.spec.layers) if layer.kind in ("dense", "conv")]

    @property
    def final_layer(self):
        return self.layer_indices[-1]

    @property
    def prunable(self):
        """Names of the weight tensors masks are computed for."""
        return ["%d.weight" % i for i in self.layer_indices]

    @property
    def means(self):
        return list(self.masks)

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def sparsity(self):
        total = sum(self.masks[name].size for name in self.prunable)
        kept = sum(int(np.count_nonzero(self.masks[name])) for name in self.prunable)
        return 1.0 - kept / total

    def copy(self):
        return copy.deepcopy(self)

    def leaves(self, names=None):
        names = list(self.params) if names is None else names
        return {name: T.Tensor(self.params[name], requires_grad=True) for name in names}

    def constants(self):
        return {name: T.Tensor(p) for name, p in self.params.items()}

    def effective(self, tensors, rng=None):
        """Masked weight and bias tensors used by :meth:`forward`.

        For Bayesian models a weight sample is drawn when `rng` is
        given; otherwise the posterior means are used.

        """
        out = {}
        for name, mask in self.masks.items():
            w = tensors[name]
            if self.bayesian and rng is not None:
                eps = rng.standard_normal(mask.shape)
                w = w + T.softplus(tensors[name + "_rho"]) * eps
            out[name] = w * mask
        return out

    def _run(self, x, weights, stop=None):
        x = T.as_tensor(x)
        n = x.shape[0]
        x = T.reshape(x, (n,) + tuple(self.spec.input_shape))
        for i, layer in enumerate(self.spec.layers):
            if i == stop:
                break
            if layer.kind == "dense":
                x = T.matmul(x, T.transpose(weights["%d.weight" % i])) + weights["%d.bias" % i]
            elif layer.kind == "conv":
                x = T.conv2d(x, weights["%d.weight" % i], padding=layer.kernel // 2)
                x = x + T.reshape(weights["%d.bias" % i], (1, -1, 1, 1))
            elif layer.kind == "pool":
                x = T.maxpool2d(x)
            elif layer.kind == "relu":
                x = T.relu(x)
            else:
                x = T.flatten(x)
        return x

    def forward(self, x, weights):
        """Logits of `x` under the effective `weights`."""
        return self._run(x, weights)

    def features(self, x):
        """Inputs to the final layer, as an array."""
        return self._run(x, self.effective(self.constants()), stop=self.final_layer).data

    def __call__(self, x):
        return self.forward(x, self.effective(self.constants()))

    def apply_mask(self, mask):
        """Install `mask` entries and zero the masked-out weights."""
        for name, m in mask.items():
            if name not in self.masks:
                raise KeyError(name)
            if m.shape != self.masks[name].shape:
                raise SpecError(
                    "Mask shape %s does not match %s for %s" % (m.shape, self.masks[name].shape, name)
                )
            self.masks[name] = np.asarray(m != 0, dtype=np.float64)
            self.params[name] = np.where(self.masks[name] != 0, self.params[name], 0.0)


def mlp3(input_dim=784, classes=10, seed=0, hidden=(300, 100), bayesian=False):
    """The 784-300-100-C perceptron."""
    dims = (input_dim,) + tuple(hidden)
    layers = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        layers += [LayerSpec("dense", fan_in, fan_out), LayerSpec("relu")]
    layers.append(LayerSpec("dense", dims[-1], classes))
    return ModelSpec(tuple(layers), classes, seed, (input_dim,), bayesian)


def convs(input_shape=(1, 28, 28), classes=10, seed=0, channels=(8, 16), hidden=64, kernel=3, bayesian=False):
    """A small convolutional network: two conv/pool stages and two dense layers."""
    c, h, w = input_shape
    layers = []
    for fan_out in channels:
        layers += [LayerSpec("conv", c, fan_out, kernel), LayerSpec("relu"), LayerSpec("pool")]
        c, h, w = fan_out, h // 2, w // 2
    layers += [
        LayerSpec("flatten"),
        LayerSpec("dense", c * h * w, hidden),
        LayerSpec("relu"),
        LayerSpec("dense", hidden, classes),
    ]
    return ModelSpec(tuple(layers), classes, seed, tuple(input_shape), bayesian)


def predict(model, batch):
    """Class probabilities, one row per sample."""
    return T.softmax(model(batch)).data


def bayesian_predict(model, batch, n_samples, seed=0):
    """Monte Carlo average of class probabilities over weight samples."""
    if n_samples < 1:
        raise ValueError("At least one sample required")
    rng = np.random.default_rng(seed)
    constants = model.constants()
    total = 0.0
    for _ in range(n_samples):
        total = total + T.softmax(model.forward(batch, model.effective(constants, rng))).data
    return total / n_samples


def kl_penalty(model, tensors):
    """KL divergence of the masked posterior from a standard normal prior."""
    total = 0.0
    for name, mask in model.masks.items():
        mu = tensors[name]
        sigma = T.softplus(tensors[name + "_rho"])
        assert (sigma.data[mask != 0] > 0).all(), "Non-positive standard deviation in %s" % name
        term = mu * mu + sigma * sigma - 1.0 - 2.0 * T.log(sigma)
        total = T.sum(term * mask) * 0.5 + total
    return total


def bayesian_loss(model, batch, labels, kl_weight, rng=None, leaves=None):
    """Variational free energy: sampled cross-entropy plus weighted KL."""
    if not model.bayesian:
        raise SpecError("Model is not Bayesian")
    rng = rng or np.random.default_rng(0)
    leaves = model.leaves() if leaves is None else leaves
    logits = model.forward(batch, model.effective(leaves, rng))
    return cross_entropy(logits, labels) + kl_penalty(model, leaves) * kl_weight


class Ensemble(object):
    """Independently initialized members sharing one specification."""

    def __init__(self, spec, seeds):
        seeds = list(seeds)
        if not seeds:
            raise SpecError("Ensemble needs at least one member")
        if len(set(seeds)) != len(seeds):
            raise SpecError("Ensemble member seeds must be distinct")
        self.spec = spec
        self.seeds = seeds
        self.members = [Network(spec._replace(seed=s)) for s in seeds]

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


def ensemble_predict(ensemble, batch):
    """Average member probabilities, independent of member order."""
    probs = np.stack([predict(m, batch) for m in ensemble])
    return np.sort(probs, axis=0).sum(axis=0) / len(probs)
