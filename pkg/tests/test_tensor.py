import unittest

import numpy as np

from prunelib import tensor as T
from prunelib.functional import cross_entropy
from prunelib.models import Network, mlp3

RAMP = np.arange(12.0).reshape(4, 3)


def numeric_grad(fn, arrays, h=1e-6):
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for j in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][j] += h
            minus[i][j] -= h
            hi = fn([T.Tensor(x) for x in plus]).item()
            lo = fn([T.Tensor(x) for x in minus]).item()
            g[j] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


class TensorTest(unittest.TestCase):
    def assertGradient(self, fn, arrays):
        _, grads = T.gradient(fn, arrays)
        for got, expected in zip(grads, numeric_grad(fn, arrays)):
            np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-7)

    def test_primitives(self):
        rng = np.random.default_rng(0)
        positive = rng.uniform(0.5, 2.0, (3, 4))
        for fn, arrays in (
            (lambda t: T.sum(T.add(t[0], t[1])), [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
            (lambda t: T.sum(T.sub(t[0], t[1]) ** 2), [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))]),
            (lambda t: T.sum(T.mul(t[0], t[1])), [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))]),
            (lambda t: T.sum(T.div(t[0], t[1])), [rng.normal(size=(3, 4)), positive]),
            (lambda t: T.sum(T.neg(t[0]) * t[0]), [rng.normal(size=(2, 3))]),
            (lambda t: T.sum(T.matmul(t[0], t[1]) ** 2), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
            (lambda t: T.sum(T.transpose(t[0]) * RAMP), [rng.normal(size=(3, 4))]),
            (lambda t: T.sum(T.relu(t[0]) * t[0]), [rng.normal(size=(3, 4))]),
            (lambda t: T.sum(T.power(t[0], 3)), [rng.normal(size=(3, 4))]),
            (lambda t: T.sum(T.power(t[0], 0.5)), [positive]),
            (lambda t: T.sum(T.absolute(t[0]) * t[0]), [rng.normal(size=(3, 4))]),
            (lambda t: T.sum(T.exp(t[0])), [rng.normal(size=(3, 4))]),
            (lambda t: T.sum(T.log(t[0])), [positive]),
            (lambda t: T.sum(T.softplus(t[0] * 3.0)), [rng.normal(size=(3, 4))]),
            (lambda t: T.mean(T.sum(t[0], axis=1) ** 2), [rng.normal(size=(3, 4))]),
            (lambda t: T.sum(T.mean(t[0], axis=0, keepdims=True) ** 2), [rng.normal(size=(3, 4))]),
            (lambda t: T.sum(T.reshape(t[0], (4, 3)) * RAMP), [rng.normal(size=(3, 4))]),
            (lambda t: T.sum(T.log_softmax(t[0]) * np.eye(4)[:3]), [rng.normal(size=(3, 4))]),
            (lambda t: T.sum(T.softmax(t[0]) ** 2), [rng.normal(size=(3, 4))]),
        ):
            self.assertGradient(fn, arrays)

    def test_operators(self):
        a, b = T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]])
        for res, expected in (
            (a + 1, [[2.0, 3.0]]),
            (1 - a, [[0.0, -1.0]]),
            (2 * a, [[2.0, 4.0]]),
            (a / 2, [[0.5, 1.0]]),
            (-a, [[-1.0, -2.0]]),
            (a**2, [[1.0, 4.0]]),
            (a @ b, [[11.0]]),
            (a.T, [[1.0], [2.0]]),
            (a.sum(), 3.0),
            (a.mean(), 1.5),
            (a.reshape(2, 1), [[1.0], [2.0]]),
        ):
            np.testing.assert_array_equal(res.data, expected)

    def test_relu_nan(self):
        np.testing.assert_array_equal(T.relu(np.array([np.nan, -1.0, 2.0])).data, [np.nan, 0.0, 2.0])
        model = Network(mlp3(input_dim=6, classes=3, seed=0, hidden=(5, 4)))
        model.params["0.weight"][0, 0] = np.nan
        self.assertTrue(np.isnan(model(np.ones((2, 6))).data).all())

    def test_immutable(self):
        t = T.Tensor([1.0, 2.0])
        with self.assertRaises(ValueError):
            t.data[0] = 3.0

    def test_conv2d(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        for padding in (0, 1):
            out = T.conv2d(x, w, padding).data
            xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            size = 5 + 2 * padding - 2
            expected = np.zeros((2, 3, size, size))
            for n in range(2):
                for f in range(3):
                    for i in range(size):
                        for j in range(size):
                            expected[n, f, i, j] = np.sum(xp[n, :, i : i + 3, j : j + 3] * w[f])
            np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)
            weights = rng.normal(size=(2, 3, size, size))
            self.assertGradient(lambda t: T.sum(T.conv2d(t[0], t[1], padding) * weights), [x, w])

    def test_maxpool2d(self):
        x = np.array([[[[1.0, 3.0, 2.0, 2.0], [0.0, 2.0, 2.0, 2.0]]]])
        out = T.maxpool2d(x)
        np.testing.assert_array_equal(out.data, [[[[3.0, 2.0]]]])
        leaf = T.Tensor(x, requires_grad=True)
        grads = T.backward(T.sum(T.maxpool2d(leaf)), [leaf])
        np.testing.assert_array_equal(grads[leaf], [[[[0.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0]]]])
        rng = np.random.default_rng(2)
        self.assertGradient(lambda t: T.sum(T.maxpool2d(t[0]) ** 2), [rng.normal(size=(2, 2, 4, 4))])

    def test_model_gradient(self):
        model = Network(mlp3(input_dim=6, classes=3, seed=0, hidden=(5, 4)))
        rng = np.random.default_rng(3)
        x = rng.normal(size=(7, 6))
        y = rng.integers(0, 3, 7)
        names = model.means

        def loss(tensors):
            return cross_entropy(model.forward(x, model.effective(dict(zip(names, tensors)))), y)

        self.assertGradient(loss, [model.params[n] for n in names])

    def test_backward(self):
        a = T.Tensor([1.0, 2.0], requires_grad=True)
        unused = T.Tensor([5.0], requires_grad=True)
        loss = T.sum(a * a)
        grads = T.backward(loss, [a, unused])
        np.testing.assert_array_equal(grads[a], [2.0, 4.0])
        np.testing.assert_array_equal(grads[unused], [0.0])
        self.assertEqual(list(T.backward(loss)), [a])
        with self.assertRaises(T.GradientError):
            T.backward(a * a)

    def test_shared_subexpression(self):
        a = T.Tensor(3.0, requires_grad=True)
        b = a * a
        grads = T.backward(b * b, [a])
        self.assertEqual(grads[a], 4 * 27.0)

    def test_constants(self):
        out = T.Tensor([1.0]) * T.Tensor([2.0])
        self.assertFalse(out.requires_grad)
        self.assertEqual(out.parents, ())

    def test_tape(self):
        a = T.Tensor([1.0], requires_grad=True)
        b = T.Tensor([2.0], requires_grad=True)
        out = T.sum(a * b + a)
        tape = T.Tape(out)
        self.assertIs(tape.nodes[-1], out)
        self.assertEqual(len(tape), 5)
        self.assertEqual(set(map(id, tape.leaves)), {id(a), id(b)})

    def test_dimension_errors(self):
        for fn, args in (
            (T.add, (np.zeros(3), np.zeros(4))),
            (T.matmul, (np.zeros((2, 3)), np.zeros((2, 3)))),
            (T.transpose, (np.zeros(3),)),
            (T.reshape, (np.zeros(6), (4, 2))),
            (T.conv2d, (np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)))),
            (T.maxpool2d, (np.zeros((1, 1, 3, 4)),)),
            (T.select_through, (np.zeros(3), np.zeros(4))),
        ):
            with self.assertRaises(T.DimensionError):
                fn(*args)

    def test_select_through(self):
        scores = T.Tensor([0.3, -1.0, 2.0], requires_grad=True)
        out = T.select_through(scores, [1.0, 0.0, 1.0])
        np.testing.assert_array_equal(out.data, [1.0, 0.0, 1.0])
        grads = T.backward(T.sum(out * np.array([1.0, 2.0, 3.0])), [scores])
        np.testing.assert_array_equal(grads[scores], [1.0, 2.0, 3.0])

    def test_hvp_quadratic(self):
        rng = np.random.default_rng(4)
        for n in (1, 5, 20):
            m = rng.normal(size=(n, n))
            a = m + m.T

            def loss(t):
                w = T.reshape(t[0], (n, 1))
                return T.sum(w * T.matmul(a, w)) * 0.5

            w = rng.normal(size=n)
            v = rng.normal(size=n)
            (hv,) = T.hvp(loss, [w], [v])
            np.testing.assert_allclose(hv, a @ v, rtol=1e-6, atol=1e-6)

    def test_hvp_errors(self):
        with self.assertRaises(T.GradientError):
            T.hvp(lambda t: T.Tensor(0.0), [], [])
        with self.assertRaises(T.DimensionError):
            T.hvp(lambda t: T.sum(t[0]), [np.zeros(3)], [np.zeros(2)])

    def test_small_network_hessian(self):
        model = Network(mlp3(input_dim=2, classes=2, seed=1, hidden=(3, 2)))
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=(4, 2)), rng.integers(0, 2, 4)
        names = model.prunable
        sizes = [model.params[n].size for n in names]
        self.assertLessEqual(sum(sizes), 20)
        fixed = model.params

        def loss(t):
            weights = dict(fixed)
            weights.update(zip(names, t))
            return cross_entropy(model.forward(x, weights), y)

        def flat_grad(flat):
            parts = np.split(flat, np.cumsum(sizes)[:-1])
            _, g = T.gradient(loss, [p.reshape(fixed[n].shape) for p, n in zip(parts, names)])
            return np.concatenate([a.reshape(-1) for a in g])

        w = np.concatenate([fixed[n].reshape(-1) for n in names])
        h = 1e-5
        hessian = np.stack(
            [(flat_grad(w + h * e) - flat_grad(w - h * e)) / (2 * h) for e in np.eye(w.size)], axis=1
        )
        v = rng.normal(size=w.size)
        parts = np.split(v, np.cumsum(sizes)[:-1])
        hv = T.hvp(loss, [fixed[n] for n in names], [p.reshape(fixed[n].shape) for p, n in zip(parts, names)])
        flat = np.concatenate([a.reshape(-1) for a in hv])
        np.testing.assert_allclose(flat, hessian @ v, rtol=1e-4, atol=1e-4)

