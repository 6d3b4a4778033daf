"""Dense float64 tensors with tape-based reverse-mode differentiation."""

import logging
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)


class DimensionError(ValueError):
    """Raised when operand shapes do not fit a primitive."""

    pass


class GradientError(ValueError):
    """Raised when a gradient or Hessian product cannot be formed."""

    pass


class Tensor(object):
    """A dense n-dimensional array of 64-bit floats.

    Tensors are immutable once created.  A tensor created with
    `requires_grad` set is a differentiable leaf; results of primitives
    applied to differentiable tensors remember their inputs, so that
    :func:`backward` can replay them in reverse.

    """

    __slots__ = ("data", "requires_grad", "op", "parents", "vjp")

    def __init__(self, data, requires_grad=False):
        data = np.array(data, dtype=np.float64)
        data.flags.writeable = False
        self.data = data
        self.requires_grad = requires_grad
        self.op = None
        self.parents = ()
        self.vjp = None

    @classmethod
    def _make(cls, data, op, parents, vjp):
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = parents
            out.vjp = vjp
        else:
            out.requires_grad = False
            out.parents = ()
            out.vjp = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __repr__(self):
        return "Tensor(shape=%s, op=%s, requires_grad=%s)" % (
            self.shape,
            self.op,
            self.requires_grad,
        )

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x):
    """Return `x` as a tensor, wrapping constants."""
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape(object):
    """The recorded computation producing a tensor.

    `nodes` lists every tensor reachable from the output in topological
    order (inputs precede the operations consuming them), and `leaves`
    lists the differentiable leaf tensors among them.

    """

    def __init__(self, output):
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order
        self.leaves = [n for n in order if n.requires_grad and not n.parents]

    def __len__(self):
        return len(self.nodes)


def backward(loss, leaves=None):
    """Differentiate the scalar tensor `loss`.

    Returns a dictionary mapping leaf tensors to gradient arrays.  If
    `leaves` is given, exactly these tensors are keys and unreachable
    leaves map to zero arrays; otherwise every differentiable leaf
    reachable from `loss` is included.

    """
    if loss.size != 1:
        raise GradientError("backward: loss must be scalar, got shape %s" % (loss.shape,))
    tape = Tape(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    found = {}
    for node in reversed(tape.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if not node.parents:
            if node.requires_grad:
                found[id(node)] = grad
            continue
        for parent, pgrad in zip(node.parents, node.vjp(grad)):
            if pgrad is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pgrad
            else:
                pending[id(parent)] = pgrad
    if leaves is None:
        leaves = tape.leaves
    return {
        leaf: np.asarray(found.get(id(leaf), np.zeros_like(leaf.data)), dtype=np.float64)
        for leaf in leaves
    }


def gradient(fn, arrays):
    """Evaluate `fn` on fresh leaves built from `arrays`.

    Returns the loss value and the list of gradient arrays.

    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(leaves)
    grads = backward(loss, leaves)
    return loss.item(), [grads[leaf] for leaf in leaves]


def hvp(fn, params, v):
    """Approximate the Hessian-vector product of `fn` at `params`.

    Uses central differences of gradients along `v` with step
    ``sqrt(2**-52) * (1 + |w|) / max(|v|, 1e-12)``.

    """
    if not len(params):
        raise GradientError("hvp: empty parameter list")
    params = [np.asarray(p, dtype=np.float64) for p in params]
    v = [np.asarray(d, dtype=np.float64) for d in v]
    if len(params) != len(v):
        raise DimensionError("hvp: %d parameters but %d directions" % (len(params), len(v)))
    for p, d in zip(params, v):
        if p.shape != d.shape:
            raise DimensionError("hvp: direction shape %s != parameter shape %s" % (d.shape, p.shape))
    wnorm = math.sqrt(math.fsum(float(np.sum(p * p)) for p in params))
    vnorm = math.sqrt(math.fsum(float(np.sum(d * d)) for d in v))
    eps = math.sqrt(2.0**-52) * (1.0 + wnorm) / max(vnorm, 1e-12)
    _, gplus = gradient(fn, [p + eps * d for p, d in zip(params, v)])
    _, gminus = gradient(fn, [p - eps * d for p, d in zip(params, v)])
    return [(a - b) / (2.0 * eps) for a, b in zip(gplus, gminus)]


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError("%s: cannot broadcast %s with %s" % (op, a.shape, b.shape))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, "mul", (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a, b)

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._make(a.data / b.data, "div", (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return Tensor._make(-a.data, "neg", (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul: cannot multiply %s by %s" % (a.shape, b.shape))

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("transpose: expected 2 dimensions, got %s" % (a.shape,))
    return Tensor._make(a.data.T, "transpose", (a,), lambda g: (g.T,))


def relu(a):
    a = as_tensor(a)
    active = a.data > 0
    return Tensor._make(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * active,))


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor._make(a.data**exponent, "power", (a,), vjp)


def absolute(a):
    a = as_tensor(a)
    return Tensor._make(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor._make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def softplus(a):
    a = as_tensor(a)
    return Tensor._make(np.logaddexp(0.0, a.data), "softplus", (a,), lambda g: (g * expit(a.data),))


def _reduced_size(shape, axis):
    if axis is None:
        return int(np.prod(shape, dtype=np.int64))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[i] for i in axes], dtype=np.int64))


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = _reduced_size(a.shape, axis)
    return div(sum(a, axis, keepdims), float(n))


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(d) for d in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape: cannot reshape %s into %s" % (a.shape, shape))
    return Tensor._make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def flatten(a):
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, "log_softmax", (a,), vjp)


def softmax(a, axis=-1):
    a = as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, "softmax", (a,), vjp)


def conv2d(x, w, padding=0):
    """Stride-1 2-D convolution of (N, C, H, W) inputs with zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d: expected 4-D input and kernel, got %s and %s" % (x.shape, w.shape))
    if x.shape[1] != w.shape[1]:
        raise DimensionError("conv2d: input has %d channels, kernel expects %d" % (x.shape[1], w.shape[1]))
    kh, kw = w.shape[2:]
    p = int(padding)
    h, wd = x.shape[2:]
    if h + 2 * p < kh or wd + 2 * p < kw:
        raise DimensionError("conv2d: kernel %s larger than padded input %s" % (w.shape[2:], x.shape[2:]))
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,fcij->nfhw", windows, w.data, optimize=True)

    def vjp(g):
        gw = np.einsum("nchwij,nfhw->fcij", windows, g, optimize=True)
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        flipped = w.data[:, :, ::-1, ::-1]
        gxp = np.einsum("nfhwij,fcij->nchw", gwin, flipped, optimize=True)
        return gxp[:, :, p : p + h, p : p + wd], gw

    return Tensor._make(out, "conv2d", (x, w), vjp)


def maxpool2d(x):
    """2x2 max pooling with stride 2; ties go to the first maximum."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError("maxpool2d: expected (N, C, even, even), got %s" % (x.shape,))
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    index = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, index, axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, index, g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return Tensor._make(out, "maxpool2d", (x,), vjp)


def select_through(scores, mask):
    """Return the binary `mask`, passing gradients straight to `scores`."""
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != scores.shape:
        raise DimensionError("select_through: mask %s does not match scores %s" % (mask.shape, scores.shape))
    return Tensor._make(mask, "select_through", (scores,), lambda g: (g,))
