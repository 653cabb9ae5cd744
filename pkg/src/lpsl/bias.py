"""Per-group accuracy and weighted bias measurements (WDP, WSD, WCV)."""
import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class GroupAccuracy:
    ids: np.ndarray
    counts: np.ndarray
    acc: np.ndarray
    boundaries: list = field(default_factory=list)
    metric: str = ""
    correct: np.ndarray = None  # integer hit counts, when known

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def average(self):
        return float(np.sum(self.counts * self.acc) / self.total)


@dataclass(frozen=True)
class BiasReport:
    metric: str
    groups: GroupAccuracy
    wdp: float
    wsd: float
    wcv: float  # None when the average accuracy is zero
    config: dict = field(default_factory=dict)

    def to_json(self):
        doc = {
            "metric": self.metric,
            "groups": [
                {"id": int(g), "n": int(n), "acc": float(a)}
                for g, n, a in zip(self.groups.ids, self.groups.counts, self.groups.acc)
            ],
            "wdp": self.wdp,
            "wsd": self.wsd,
            "wcv": self.wcv,
        }
        if self.groups.boundaries:
            doc["boundaries"] = [[float(a), float(b)] for a, b in self.groups.boundaries]
        if self.config:
            doc["config"] = self.config
        return doc

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "low", "high", "n", "acc"])
            bounds = self.groups.boundaries or [(math.nan, math.nan)] * len(self.groups.ids)
            for g, n, a in zip(self.groups.ids, self.groups.counts, self.groups.acc):
                lo, hi = bounds[int(g)] if int(g) < len(bounds) else (math.nan, math.nan)
                w.writerow([int(g), lo, hi, int(n), float(a)])


def group_accuracy(prediction, truth, partition):
    """Accuracy of each group of ``partition``; empty groups are skipped.

    ``prediction`` is a label array indexed by node id (or a ``Prediction``).
    """
    labels = np.asarray(getattr(prediction, "labels", prediction), dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    nodes = np.asarray(partition.nodes, dtype=np.int64)
    if len(nodes) and (nodes.max() >= len(labels) or nodes.max() >= len(truth)):
        raise ValidationError("partition contains nodes missing from the predictions")
    hit = (labels[nodes] == truth[nodes]).astype(np.float64)
    n_groups = partition.n_groups
    counts = np.bincount(partition.group_of, minlength=n_groups)
    correct = np.bincount(partition.group_of, weights=hit, minlength=n_groups)
    keep = np.flatnonzero(counts > 0)
    if len(keep) < n_groups:
        warnings.warn(f"{n_groups - len(keep)} empty group(s) excluded from accuracy")
    if len(keep) == 0:
        raise ValidationError("no evaluated nodes")
    return GroupAccuracy(
        ids=keep,
        counts=counts[keep],
        acc=correct[keep] / counts[keep],
        boundaries=list(partition.boundaries),
        metric=partition.metric,
        correct=correct[keep].round().astype(np.int64),
    )


def _exact_sqrt(q):
    """``sqrt`` of a non-negative Fraction, exact when it is a rational square."""
    num, den = math.isqrt(q.numerator), math.isqrt(q.denominator)
    if num * num == q.numerator and den * den == q.denominator:
        return Fraction(num, den)
    return None


def _exact_metrics(counts, correct):
    total = sum(counts)
    acc = [Fraction(c, n) for c, n in zip(correct, counts)]
    avg = Fraction(sum(correct), total)
    wdp = sum(n * abs(a - avg) for n, a in zip(counts, acc)) / total
    var = sum(n * (a - avg) ** 2 for n, a in zip(counts, acc)) / total
    root = _exact_sqrt(var)
    wsd = float(root) if root is not None else math.sqrt(float(var))
    if avg == 0:
        wcv = None
    elif root is not None:
        wcv = float(root / avg)
    else:
        wcv = wsd / float(avg)
    return float(wdp), wsd, wcv


def bias_metrics(groups, config=None):
    """``WDP = sum N_i |A_i - A| / N``, ``WSD = sqrt(sum N_i (A_i - A)^2 / N)``, ``WCV = WSD / A``.

    When the groups carry integer hit counts the sums are evaluated in exact
    rational arithmetic and rounded once at the end.
    """
    counts = np.asarray(groups.counts, dtype=np.float64)
    acc = np.asarray(groups.acc, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValidationError("total node count must be positive")
    if groups.correct is not None:
        wdp, wsd, wcv = _exact_metrics([int(n) for n in groups.counts], [int(c) for c in groups.correct])
        return BiasReport(metric=groups.metric, groups=groups, wdp=wdp, wsd=wsd, wcv=wcv, config=config or {})
    # the weighted mean of identical values is that value; avoid rounding it away
    avg = float(acc[0]) if np.all(acc == acc[0]) else float(np.sum(counts * acc) / total)
    dev = acc - avg
    wdp = float(np.sum(counts * np.abs(dev)) / total)
    wsd = float(math.sqrt(np.sum(counts * dev * dev) / total))
    wcv = wsd / avg if avg > 0 else None
    return BiasReport(metric=groups.metric, groups=groups, wdp=wdp, wsd=wsd, wcv=wcv, config=config or {})
