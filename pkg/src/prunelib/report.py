"""CSV tables and SVG plots of sweep records."""

import collections
import csv
import logging
import math
import os

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure  # noqa: E402

from .harness import RunRecord  # noqa: E402

logger = logging.getLogger(__name__)

FIELDS = RunRecord._fields

FAMILIES = ("accuracy", "auroc", "aupr", "brier", "lipschitz", "param_ratio", "sparsity_realized")

MARGIN = 0.05

_TYPES = (str, int, str, float, str, str, float, float)

_RC = {
    "svg.hashsalt": "prunelib",
    "svg.fonttype": "path",
    "path.simplify": False,
}


def family(metric):
    return metric[len("rel_") :] if metric.startswith("rel_") else metric


def write_csv(records, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(FIELDS)
        for record in records:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in record])
    return path


def read_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != FIELDS:
            raise ValueError("Unexpected CSV header %s" % header)
        return [RunRecord(*(t(v) for t, v in zip(_TYPES, row))) for row in reader]


def aggregate(records):
    """Seed-averaged values keyed by ``(method, metric, dataset, sparsity)``."""
    groups = collections.defaultdict(list)
    for r in records:
        groups[(r.method, r.metric, r.dataset, r.sparsity)].append(r.value)
    return {key: math.fsum(values) / len(values) for key, values in sorted(groups.items())}


def axis_range(values, margin=MARGIN):
    """Data limits widened by `margin` of their span on both sides."""
    values = [v for v in values if math.isfinite(v)]
    if not values:
        return (0.0, 1.0)
    lo, hi = min(values), max(values)
    span = hi - lo
    if span == 0:
        span = abs(hi) or 1.0
    return (lo - margin * span, hi + margin * span)


def plot(records, metric, dataset, path):
    """Seed-averaged `metric` on `dataset` against sparsity, one line per method."""
    means = aggregate(r for r in records if r.metric == metric and r.dataset == dataset)
    lines = collections.defaultdict(list)
    for (method, _, _, sparsity), value in means.items():
        lines[method].append((sparsity, value))
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(6, 4))
        ax = fig.add_subplot()
        for method, points in sorted(lines.items()):
            points.sort()
            ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=method)
        ax.set_xlim(*axis_range([s for (_, _, _, s) in means]))
        ax.set_ylim(*axis_range(list(means.values())))
        ax.set_xlabel("sparsity")
        ax.set_ylabel(metric)
        ax.set_title("%s on %s" % (metric, dataset))
        ax.legend(title="criterion")
        fig.savefig(path, format="svg", metadata={"Date": None})
    logger.info("Wrote %s", path)
    return path


def report(records, out):
    """Write one CSV per metric family and one SVG per plotted metric."""
    records = list(records)
    if not records:
        raise ValueError("No records to report")
    os.makedirs(out, exist_ok=True)
    paths = []
    by_family = collections.defaultdict(list)
    for r in records:
        by_family[family(r.metric)].append(r)
    for name, rows in sorted(by_family.items()):
        paths.append(write_csv(rows, os.path.join(out, "%s.csv" % name)))
    pairs = sorted({(r.metric, r.dataset) for r in records})
    relative = [p for p in pairs if p[0].startswith("rel_")]
    for metric, dataset in relative or pairs:
        paths.append(plot(records, metric, dataset, os.path.join(out, "%s_%s.svg" % (metric, dataset))))
    return paths


def read_reports(directory):
    """All records of the CSV files in `directory`."""
    records = []
    for name in sorted(os.listdir(directory)):
        if name.endswith(".csv") and family(name[:-4]) in FAMILIES:
            records.extend(read_csv(os.path.join(directory, name)))
    return records
