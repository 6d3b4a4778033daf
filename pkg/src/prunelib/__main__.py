import argparse
import json
import logging
import os
import sys

from . import checkpoint, harness, report
from .attacks import AttackError, AttackSpec, fgsm
from .config import METHODS, ConfigError, MethodSection, load_config
from .data import DataError
from .detection import DetectionError
from .idx import ParseError
from .metrics import MetricError, accuracy
from .models import SpecError
from .pruning import PruningError
from .tensor import DimensionError, GradientError
from .train import NumericError

# category and exit status of every error class, first match wins
ERRORS = (
    ((ConfigError, SpecError), "config", 2),
    ((DataError, ParseError), "data", 3),
    (checkpoint.CheckpointError, "checkpoint", 4),
    (PruningError, "pruning", 5),
    ((NumericError, GradientError, DimensionError), "numeric", 6),
    ((DetectionError, MetricError, AttackError), "detection", 7),
    (harness.HarnessError, "harness", 8),
    (OSError, "io", 9),
)

parser = argparse.ArgumentParser(prog="python -m prunelib")
parser.add_argument("-c", "--config", metavar="PATH", help="JSON experiment configuration")
parser.add_argument("-s", "--seed", type=int, help="run a single seed instead of the configured ones")
parser.add_argument("-o", "--out", metavar="DIR", help="output directory")
parser.add_argument("-l", "--logfile", default=None, help="where to write log messages")
parser.add_argument("-v", "--verbose", action="store_true", help="write more log messages")
commands = parser.add_subparsers(dest="command", metavar="COMMAND")
commands.required = True

commands.add_parser("train", help="train and save the dense models")

p = commands.add_parser("prune", help="prune with one method and save the result")
p.add_argument("--method", default="snip", help="pruning method")
p.add_argument("--sparsity", type=float, default=0.9, help="target sparsity")
p.add_argument("--checkpoint", help="trained dense model, for after-training methods")

p = commands.add_parser("attack", help="accuracy under FGSM attacks")
p.add_argument("--checkpoint", required=True, help="model to attack")
p.add_argument("--norm", choices=("linf", "l2"), action="append", help="attack norm")
p.add_argument("--epsilon", type=float, help="budget in 0-255 pixel units")

p = commands.add_parser("detect", help="batch-level anomaly detection AUROC")
p.add_argument("--checkpoint", required=True, help="model to score with")
p.add_argument("--detector", choices=harness.DETECTORS, default="sensnorm")
p.add_argument("--batch-size", type=int, action="append", help="detection batch size")

p = commands.add_parser("eval", help="all metrics of a saved model")
p.add_argument("--checkpoint", required=True, help="model to evaluate")

commands.add_parser("sweep", help="prune, evaluate and report every configured method")
commands.add_parser("ensemble", help="train, prune and shrink ensembles and report them")

p = commands.add_parser("report", help="plot previously written CSV files")
p.add_argument("--csv", metavar="DIR", help="directory holding the CSV files (default: output directory)")


def _train(config, splits):
    os.makedirs(config.out, exist_ok=True)
    for seed in config.seeds:
        harness.train_dense(config, seed, splits, config.out)
    return {"checkpoints": [os.path.join(config.out, "dense-seed%d.spnn" % s) for s in config.seeds]}


def _prune(config, splits, args):
    os.makedirs(config.out, exist_ok=True)
    if args.method not in METHODS:
        raise ConfigError("Unknown method %r" % args.method)
    method = MethodSection(name=args.method)
    dense = None
    if args.checkpoint is not None:
        dense, _ = checkpoint.load(args.checkpoint)
    result = {}
    for seed in config.seeds:
        base = dense
        if base is None and (args.method.endswith("_after") or args.method in ("magnitude", "snr", "snr_s")):
            base = harness.train_dense(config, seed, splits)
        model = harness.run_method(method, args.sparsity, seed, config, splits, base)
        path = os.path.join(config.out, "%s-%g-seed%d.spnn" % (method.label, args.sparsity, seed))
        checkpoint.save(model, path, [seed])
        result[path] = model.sparsity()
    return result


def _attack(config, splits, args, model):
    result = {"clean": accuracy(harness.probabilities(model, splits.test.inputs, config), splits.test.labels)}
    epsilon = config.attack.epsilon if args.epsilon is None else args.epsilon
    for norm in args.norm or config.attack.norms:
        spec = AttackSpec.from_pixels(norm, epsilon)
        x = fgsm(model, splits.test.inputs, splits.test.labels, spec)
        result["fgsm_" + norm] = accuracy(harness.probabilities(model, x, config), splits.test.labels)
    return result


def _detect(config, splits, args, model):
    sizes = args.batch_size or config.detect.batch_sizes
    return {str(n): harness.detection_auroc(model, splits, config, args.detector, n) for n in sizes}


def _eval(config, splits, model):
    metrics = harness.evaluate(model, splits, config)
    return {"%s/%s" % key: value for key, value in sorted(metrics.items())}


def _sweep(config, splits):
    os.makedirs(config.out, exist_ok=True)
    records = harness.sweep(config, splits)
    return {"files": report.report(records, config.out)}


def _ensemble(config, splits):
    os.makedirs(config.out, exist_ok=True)
    records = harness.ensemble_sweep(config, splits)
    return {"files": report.report(records, config.out)}


def run(args):
    seeds = None if args.seed is None else [args.seed]
    config = load_config(args.config, seeds=seeds, out=args.out)
    if args.command == "report":
        directory = args.csv or config.out
        records = report.read_reports(directory)
        if not records:
            raise harness.HarnessError("No sweep records in %s" % directory)
        return {"files": report.report(records, config.out)}
    splits = harness.load_splits(config)
    if args.command == "train":
        return _train(config, splits)
    if args.command == "prune":
        return _prune(config, splits, args)
    if args.command == "sweep":
        return _sweep(config, splits)
    if args.command == "ensemble":
        return _ensemble(config, splits)
    model, _ = checkpoint.load(args.checkpoint)
    if args.command == "attack":
        return _attack(config, splits, args, model)
    if args.command == "detect":
        return _detect(config, splits, args, model)
    return _eval(config, splits, model)


def main(argv=None):
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARN,
        filename=args.logfile,
        format="%(asctime)s: %(message)s",
    )

    try:
        result = run(args)
    except Exception as e:
        for types, category, status in ERRORS:
            if isinstance(e, types):
                print("error: %s: %s" % (category, e), file=sys.stderr)
                return status
        raise
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
