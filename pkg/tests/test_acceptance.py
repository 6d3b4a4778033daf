"""Slow end-to-end checks, enabled with PRUNELIB_ACCEPTANCE=1.

PRUNELIB_MNIST may name a directory holding the four MNIST IDX files;
synthetic images are used otherwise.

"""

import glob
import os
import unittest

import numpy as np
from scipy.stats import spearmanr

from prunelib import data, harness, report
from prunelib.config import MethodSection, load_config
from prunelib.detection import batch_msp, fit_profile, sensnorm_score, sensnorm_single
from prunelib.functional import cross_entropy
from prunelib.metrics import HIGH, LOW, accuracy, auroc
from prunelib.models import predict
from prunelib.pruning import compute_scores

ENABLED = os.environ.get("PRUNELIB_ACCEPTANCE") == "1"

MNIST = (
    ("train_images", "train-images"),
    ("train_labels", "train-labels"),
    ("test_images", "t10k-images"),
    ("test_labels", "t10k-labels"),
)


def desk_config(**overrides):
    section = {"train_size": 5000, "test_size": 2000}
    root = os.environ.get("PRUNELIB_MNIST")
    if root:
        for key, prefix in MNIST:
            found = sorted(glob.glob(os.path.join(root, prefix + "*")))
            if not found:
                raise unittest.SkipTest("no %s file in %s" % (prefix, root))
            section[key] = found[0]
    raw = dict(
        data=section,
        train={"epochs": 10, "batch_size": 128},
        detect={"profile_batches": 1000, "lipschitz_samples": 5},
        report={"workers": 3, "wall_time": False},
        seeds=[0, 1, 2],
    )
    raw.update(overrides)
    return load_config(**raw)


def chunks(inputs, size, limit):
    return [inputs[i * size : (i + 1) * size] for i in range(min(len(inputs) // size, limit))]


@unittest.skipUnless(ENABLED, "set PRUNELIB_ACCEPTANCE=1 to run")
class AcceptanceTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.config = desk_config()
        cls.splits = harness.load_splits(cls.config)
        cls.baselines = harness.train_baselines(cls.config, cls.splits)
        cls.model, cls.metrics = cls.baselines[0]

    def test_dense_accuracy(self):
        self.assertGreaterEqual(self.metrics[("accuracy", "clean")], 0.9)

    def test_corruption_severity(self):
        test = self.splits.test
        accuracies = []
        for severity in range(1, 6):
            shifted = data.corrupt(test, data.CorruptionSpec("gaussian_noise", severity))
            accuracies.append(accuracy(predict(self.model, shifted.inputs), shifted.labels))
        for a, b in zip(accuracies, accuracies[1:]):
            self.assertLessEqual(b, a + 0.01)

    def test_snip_tracks_removal(self):
        model = self.model.copy()
        x, y = self.splits.test.inputs[:500], self.splits.test.labels[:500]
        scores = compute_scores(model, [(x, y)], "snip")
        name = model.prunable[-1]
        base = cross_entropy(model(x), y).item()
        changes = []
        for index in np.ndindex(model.params[name].shape):
            params = model.params[name]
            saved = params[index]
            params[index] = 0.0
            changes.append(abs(cross_entropy(model(x), y).item() - base))
            params[index] = saved
        rho, _ = spearmanr(scores[name].reshape(-1), changes)
        self.assertGreater(rho, 0.8)

    def test_sensnorm_rescaled_test_batches(self):
        d = self.config.detect
        test = self.splits.test.inputs
        rescaled = data.make_oodom(self.splits.test).inputs
        profile = fit_profile(self.model, self.splits.train, 100, d.p, d.sigma_floor, d.test_loss)
        inside = [sensnorm_score(self.model, profile, b) for b in chunks(test, 100, 20)]
        outside = [sensnorm_score(self.model, profile, b) for b in chunks(rescaled, 100, 20)]
        self.assertGreaterEqual(auroc(inside, outside, HIGH), 0.99)
        self.assertLess(np.median(inside), np.median(outside))
        msp_in = [batch_msp(predict(self.model, b)) for b in chunks(test, 100, 20)]
        msp_out = [batch_msp(predict(self.model, b)) for b in chunks(rescaled, 100, 20)]
        self.assertLessEqual(auroc(msp_in, msp_out, LOW), 0.65)

        k = 15
        single = fit_profile(
            self.model, self.splits.train, k + 1, d.p, d.sigma_floor, d.test_loss, k, limit=300
        )
        inside = [sensnorm_single(self.model, single, x, k) for x in test[:100]]
        outside = [sensnorm_single(self.model, single, x, k) for x in rescaled[:100]]
        self.assertGreaterEqual(auroc(inside, outside, HIGH), 0.95)

    def test_sensnorm_ood(self):
        sensnorm, msp = [], []
        for seed, (model, _) in sorted(self.baselines.items()):
            for detector, values in (("sensnorm", sensnorm), ("msp", msp)):
                out = harness.detection_auroc(model, self.splits, self.config, detector, 100, seed)
                values.append(out["ood"])
        self.assertGreaterEqual(np.mean(sensnorm), 0.95)
        self.assertGreaterEqual(np.mean(sensnorm), np.mean(msp) - 0.02)

    def test_objective_subnetworks(self):
        for objective, metric, gain in (
            ("ood", ("auroc", "ood"), 0.05),
            ("aa", ("accuracy", "fgsm_linf"), 0.10),
        ):
            method = MethodSection(name="edge_popup_after", objective=objective)
            pruned = harness.run_method(method, 0.5, 0, self.config, self.splits, self.model)
            for name, param in pruned.params.items():
                kept = pruned.masks[name] != 0
                np.testing.assert_array_equal(param[kept], self.model.params[name][kept], name)
            metrics = harness.evaluate(pruned, self.splits, self.config)
            self.assertGreaterEqual(metrics[metric], self.metrics[metric] + gain, objective)

    def test_pruning_retention(self):
        methods = ["snip", "crop", "early_crop", "imp"]
        config = desk_config(prune={"methods": methods, "sparsities": [0.9]})
        means = report.aggregate(harness.sweep(config, self.splits, self.baselines))
        for method in methods:
            self.assertGreaterEqual(means[(method, "rel_accuracy", "clean", 0.9)], 0.95, method)
            self.assertGreaterEqual(means[(method, "rel_accuracy", "fgsm_linf", 0.9)], 0.9, method)

    def test_bayesian_node_pruning(self):
        config = desk_config(model={"bayesian": True}, seeds=[0])
        dense = harness.train_dense(config, 0, self.splits)
        method = MethodSection(name="snr_s", scope="local")
        pruned = harness.run_method(method, 0.5, 0, config, self.splits, dense)
        test = self.splits.test

        def score(model):
            return accuracy(harness.probabilities(model, test.inputs, config), test.labels)

        self.assertGreaterEqual(score(pruned), score(dense) - 0.02)


if __name__ == "__main__":
    unittest.main()
