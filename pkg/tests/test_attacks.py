import unittest

import numpy as np

from prunelib import tensor as T
from prunelib.attacks import AttackError, AttackSpec, fgsm, perturbation
from prunelib.functional import cross_entropy

W = np.array([[1.0, -2.0, 0.5], [0.5, 1.0, -1.0]])


def linear(inputs):
    return T.matmul(inputs, W)


def per_sample_loss(x, y):
    return np.array([cross_entropy(linear(x[i : i + 1]), y[i : i + 1]).item() for i in range(len(x))])


class PerturbationTest(unittest.TestCase):
    def test_examples(self):
        for grad, spec, expected in (
            ([[0.3, -0.2, 0.0]], AttackSpec("linf", 0.1), [[0.1, -0.1, 0.0]]),
            ([[3.0, 4.0]], AttackSpec("l2", 1.0), [[0.6, 0.8]]),
            ([[3.0, 4.0], [0.0, 0.0]], AttackSpec("l2", 2.0), [[1.2, 1.6], [0.0, 0.0]]),
        ):
            np.testing.assert_allclose(perturbation(np.array(grad), spec), expected, rtol=1e-12)

    def test_image_norm(self):
        grad = np.random.default_rng(0).normal(size=(4, 1, 5, 5))
        delta = perturbation(grad, AttackSpec("l2", 0.5))
        self.assertEqual(delta.shape, grad.shape)
        np.testing.assert_allclose(np.linalg.norm(delta.reshape(4, -1), axis=1), 0.5, rtol=1e-12)

    def test_from_pixels(self):
        self.assertEqual(AttackSpec.from_pixels("linf", 8).epsilon, 8 / 255.0)
        self.assertEqual(AttackSpec.from_pixels("l2", 255).epsilon, 1.0)

    def test_errors(self):
        for args in (("l1", 0.1), ("linf", 0.0), ("l2", -1.0), ("linf", 0.1, (1.0, 0.0))):
            with self.assertRaises(AttackError):
                AttackSpec(*args)


class FGSMTest(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(1)
        self.x = rng.uniform(0.2, 0.8, (6, 2))
        self.y = rng.integers(0, 3, 6)

    def test_matches_gradient(self):
        inputs = T.Tensor(self.x, requires_grad=True)
        grad = T.backward(cross_entropy(linear(inputs), self.y, reduction="sum"), [inputs])[inputs]
        for spec in (AttackSpec("linf", 0.05), AttackSpec("l2", 0.1)):
            expected = np.clip(self.x + perturbation(grad, spec), 0.0, 1.0)
            np.testing.assert_array_equal(fgsm(linear, self.x, self.y, spec), expected)

    def test_budget(self):
        for spec in (AttackSpec("linf", 0.3), AttackSpec("l2", 0.4), AttackSpec("linf", 2.0)):
            out = fgsm(linear, self.x, self.y, spec)
            delta = out - self.x
            if spec.norm == "linf":
                self.assertLessEqual(np.abs(delta).max(), spec.epsilon + 1e-12)
            else:
                self.assertTrue((np.linalg.norm(delta, axis=1) <= spec.epsilon + 1e-12).all())
            self.assertGreaterEqual(out.min(), 0.0)
            self.assertLessEqual(out.max(), 1.0)

    def test_increases_loss(self):
        # the loss of a linear model is convex in its input
        for spec in (AttackSpec("linf", 0.05, None), AttackSpec("l2", 0.05, None)):
            out = fgsm(linear, self.x, self.y, spec)
            self.assertTrue((per_sample_loss(out, self.y) > per_sample_loss(self.x, self.y)).all())

    def test_zero_gradient(self):
        def constant(inputs):
            return T.mul(inputs, 0.0) @ W

        for spec in (AttackSpec("linf", 0.1), AttackSpec("l2", 0.1)):
            np.testing.assert_array_equal(fgsm(constant, self.x, self.y, spec), self.x)

    def test_empty(self):
        out = fgsm(linear, np.zeros((0, 2)), np.zeros(0, dtype=int), AttackSpec("linf", 0.1))
        self.assertEqual(out.shape, (0, 2))

    def test_errors(self):
        spec = AttackSpec("linf", 0.1)
        for y in (None, self.y[:3]):
            with self.assertRaises(AttackError):
                fgsm(linear, self.x, y, spec)


if __name__ == "__main__":
    unittest.main()
