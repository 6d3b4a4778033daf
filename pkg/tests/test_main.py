import contextlib
import io
import json
import os
import tempfile
import unittest

from prunelib.__main__ import main

CONFIG = {
    "model": {"hidden": [8, 6]},
    "data": {"train_size": 60, "test_size": 30, "side": 4},
    "train": {"epochs": 1, "batch_size": 20},
    "prune": {"methods": ["snip"], "sparsities": [0.5]},
    "attack": {"norms": ["linf"]},
    "detect": {"batch_sizes": [5], "profile_batches": 3, "lipschitz_samples": 2, "lipschitz_iterations": 2},
    "report": {"workers": 1, "wall_time": False},
    "seeds": [0],
}


class MainTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.out = os.path.join(self.tmp.name, "out")
        self.config = self.write("config.json", json.dumps(CONFIG))

    def write(self, name, content, mode="w"):
        path = os.path.join(self.tmp.name, name)
        with open(path, mode) as f:
            f.write(content)
        return path

    def run_main(self, *argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            status = main(["-c", self.config, "-o", self.out] + list(argv))
        return status, stdout.getvalue(), stderr.getvalue()

    def test_train_and_use(self):
        status, stdout, _ = self.run_main("train")
        self.assertEqual(status, 0)
        dense = os.path.join(self.out, "dense-seed0.spnn")
        self.assertEqual(json.loads(stdout), {"checkpoints": [dense]})
        self.assertTrue(os.path.exists(dense))

        status, stdout, _ = self.run_main(
            "prune", "--method", "magnitude", "--sparsity", "0.5", "--checkpoint", dense
        )
        self.assertEqual(status, 0)
        ((path, sparsity),) = json.loads(stdout).items()
        self.assertTrue(os.path.exists(path))
        self.assertAlmostEqual(sparsity, 0.5, delta=0.01)

        status, stdout, _ = self.run_main("attack", "--checkpoint", path)
        self.assertEqual(status, 0)
        self.assertEqual(set(json.loads(stdout)), {"clean", "fgsm_linf"})

        status, stdout, _ = self.run_main("detect", "--checkpoint", path, "--detector", "msp")
        self.assertEqual(status, 0)
        self.assertEqual(set(json.loads(stdout)["5"]), {"ood", "oodom"})

        status, stdout, _ = self.run_main("eval", "--checkpoint", path)
        self.assertEqual(status, 0)
        self.assertIn("accuracy/clean", json.loads(stdout))

    def test_sweep_and_report(self):
        status, stdout, _ = self.run_main("sweep")
        self.assertEqual(status, 0)
        files = json.loads(stdout)["files"]
        self.assertIn(os.path.join(self.out, "accuracy.csv"), files)
        with open(os.path.join(self.out, "rel_accuracy_clean.svg"), "rb") as f:
            svg = f.read()
        status, stdout, _ = self.run_main("report", "--csv", self.out)
        self.assertEqual(status, 0)
        self.assertEqual(json.loads(stdout)["files"], files)
        with open(os.path.join(self.out, "rel_accuracy_clean.svg"), "rb") as f:
            self.assertEqual(f.read(), svg)

    def test_sweep_rerun(self):
        first = os.path.join(self.tmp.name, "first")
        with contextlib.redirect_stdout(io.StringIO()):
            self.assertEqual(main(["-c", self.config, "-o", first, "sweep"]), 0)
            self.assertEqual(main(["-c", self.config, "-o", self.out, "sweep"]), 0)
        names = sorted(os.listdir(first))
        self.assertEqual(names, sorted(os.listdir(self.out)))
        for name in names:
            with open(os.path.join(first, name), "rb") as f, open(os.path.join(self.out, name), "rb") as g:
                self.assertEqual(f.read(), g.read(), name)

    def test_ensemble(self):
        raw = dict(CONFIG, ensemble={"members": 2, "sparsities": [0.5]})
        self.config = self.write("ensemble.json", json.dumps(raw))
        status, stdout, _ = self.run_main("ensemble")
        self.assertEqual(status, 0)
        self.assertIn(os.path.join(self.out, "param_ratio.csv"), json.loads(stdout)["files"])
        with open(os.path.join(self.out, "param_ratio.csv")) as f:
            rows = f.read().splitlines()
        self.assertEqual(len(rows), 3)
        self.assertEqual({row.split(",")[2] for row in rows[1:]}, {"ensemble", "ensemble_crop_s"})

    def test_prune_before_training(self):
        status, stdout, _ = self.run_main("prune", "--method", "snip", "--sparsity", "0.8")
        self.assertEqual(status, 0)
        ((path, sparsity),) = json.loads(stdout).items()
        self.assertEqual(os.path.basename(path), "snip-0.8-seed0.spnn")

    def test_exit_codes(self):
        garbage = self.write("garbage.spnn", b"not a checkpoint", "wb")
        os.makedirs(self.out)
        for argv, config, status, category in (
            (("prune", "--method", "random"), None, 2, "config"),
            (("train",), self.write("bad.json", json.dumps({"seeds": [1, 1]})), 2, "config"),
            (("train",), self.write("broken.json", "{"), 2, "config"),
            (("eval", "--checkpoint", garbage), None, 4, "checkpoint"),
            (("prune", "--sparsity", "1.0"), None, 5, "pruning"),
            (("report",), None, 8, "harness"),
            (("eval", "--checkpoint", os.path.join(self.tmp.name, "missing.spnn")), None, 9, "io"),
        ):
            if config is not None:
                self.config = config
            got, stdout, stderr = self.run_main(*argv)
            self.assertEqual(got, status, argv)
            self.assertTrue(stderr.startswith("error: %s: " % category), stderr)
            self.assertEqual(stdout, "")
            self.config = os.path.join(self.tmp.name, "config.json")

    def test_usage(self):
        with contextlib.redirect_stderr(io.StringIO()):
            for argv in ([], ["fly"], ["detect"]):
                with self.assertRaises(SystemExit):
                    main(argv)


if __name__ == "__main__":
    unittest.main()
