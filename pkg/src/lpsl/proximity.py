"""Label Proximity Scores and sensitive-group partitions of test nodes."""
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConvergenceError, ValidationError
from .kernels import UNREACHABLE

METRICS = ("degree", "spd", "lps")


@dataclass(frozen=True)
class LpsVector:
    scores: np.ndarray
    alpha: float
    iterations: int = 0
    residual: float = 0.0

    def to_json(self):
        return {"alpha": self.alpha, "scores": self.scores.tolist()}


@dataclass(frozen=True)
class GroupPartition:
    """Assignment of test nodes to ``n_groups`` sensitive groups.

    ``boundaries[g]`` is the ``(low, high)`` value range of group ``g``; for
    degree/spd groups these are integer keys (``high`` of the last group is
    ``inf`` when values were clamped into it).
    """

    metric: str
    nodes: np.ndarray
    group_of: np.ndarray
    boundaries: list

    @property
    def n_groups(self):
        return len(self.boundaries)

    def members(self, g):
        return self.nodes[self.group_of == g]

    def sizes(self):
        return np.bincount(self.group_of, minlength=self.n_groups)

    def to_json(self):
        return {
            "metric": self.metric,
            "boundaries": [[float(a), float(b)] for a, b in self.boundaries],
            "groups": {str(int(v)): int(g) for v, g in zip(self.nodes, self.group_of)},
        }

    @classmethod
    def from_json(cls, doc):
        items = sorted((int(k), int(v)) for k, v in doc["groups"].items())
        nodes = np.array([k for k, _ in items], dtype=np.int64)
        group_of = np.array([v for _, v in items], dtype=np.int64)
        return cls(doc["metric"], nodes, group_of, [tuple(b) for b in doc["boundaries"]])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


def lps_scores(norm_ops, label_mask, alpha=0.1, tol=1e-10, max_iter=10_000):
    """Label Proximity Score ``s = (I - (1 - alpha) Ã)^-1 t``.

    ``t`` is the labeled-node indicator. Solved by the Neumann iteration
    ``s <- t + (1 - alpha) Ã s``, stopping once the residual
    ``||(I - (1 - alpha) Ã) s - t||_inf`` drops to ``tol``.
    """
    if not 0 < alpha <= 1:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    t = np.asarray(label_mask, dtype=np.float64)
    if t.sum() == 0:
        raise ValidationError("at least one labeled node is required")
    A = norm_ops.norm_adj
    decay = 1.0 - alpha
    s = t.copy()
    for it in range(1, max_iter + 1):
        nxt = t + decay * kernels.spmm(A, s[:, None])[:, 0]
        # the update size is exactly the residual of the current iterate
        res = float(np.max(np.abs(nxt - s)))
        if res <= tol:
            return LpsVector(scores=s, alpha=alpha, iterations=it, residual=res)
        s = nxt
    raise ConvergenceError(f"LPS iteration did not reach tol={tol} in {max_iter} steps (residual {res:.3e})")


def spd_to_labeled(graph, label_mask):
    """Hop distance to the nearest labeled node (``UNREACHABLE`` if none)."""
    sources = np.flatnonzero(np.asarray(label_mask, dtype=bool))
    return kernels.bfs(graph.indptr, graph.indices, sources)


def _merge_small(counts, ranges, min_size):
    """Drop empty bins, then fold bins under ``min_size`` into a neighbour.

    A small bin joins its lower-index neighbour, or the upper one when it is
    the first bin. Returns ``(mapping old bin -> new group, new ranges)``.
    """
    groups = [[i] for i, c in enumerate(counts) if c > 0]
    sizes = [counts[g[0]] for g in groups]
    while len(groups) > 1:
        small = [i for i, s in enumerate(sizes) if s < min_size]
        if not small:
            break
        i = small[0]
        j = i - 1 if i > 0 else 1
        lo, hi = min(i, j), max(i, j)
        groups[lo] = groups[lo] + groups[hi]
        sizes[lo] += sizes[hi]
        del groups[hi], sizes[hi]
    mapping = np.full(len(counts), -1, dtype=np.int64)
    new_ranges = []
    for g, members in enumerate(groups):
        mapping[members] = g
        new_ranges.append((ranges[min(members)][0], ranges[max(members)][1]))
    return mapping, new_ranges


def partition_groups(
    values,
    metric,
    test_nodes,
    n_groups=7,
    min_group_size=10,
    outlier_quantile=0.99,
    drop_above=False,
):
    """Split ``test_nodes`` into sensitive groups by ``values[test_nodes]``.

    degree / spd
        Group key is the integer value ``1..n_groups``; larger values are
        clamped into the last key, or removed when ``drop_above`` is set.
    lps
        Values above the ``outlier_quantile`` quantile are clipped to it
        (``None`` or ``1.0`` disables clipping), then ``[min, max]`` is cut
        into ``n_groups`` equal-width bins.

    Bins with fewer than ``min_group_size`` members are merged into an
    adjacent bin; empty bins are removed.
    """
    if metric not in METRICS:
        raise ValidationError(f"metric must be one of {METRICS}")
    nodes = np.asarray(test_nodes, dtype=np.int64)
    vals = np.asarray(values)[nodes]

    if metric == "lps":
        vals = vals.astype(np.float64)
        if not np.all(np.isfinite(vals)):
            raise ValidationError("LPS values must be finite")
        if outlier_quantile is not None and outlier_quantile < 1.0:
            vals = np.minimum(vals, np.quantile(vals, outlier_quantile))
        lo, hi = float(vals.min()), float(vals.max())
        width = (hi - lo) / n_groups
        if width > 0:
            bins = np.minimum(((vals - lo) / width).astype(np.int64), n_groups - 1)
        else:
            bins = np.zeros(len(vals), dtype=np.int64)
        ranges = [(lo + k * width, lo + (k + 1) * width) for k in range(n_groups)]
        ranges[-1] = (ranges[-1][0], hi)
    else:
        ints = vals.astype(np.int64)
        if drop_above:
            keep = ints <= n_groups
            nodes, ints = nodes[keep], ints[keep]
        if np.any(ints < 1):
            raise ValidationError(f"{metric} values of test nodes must be >= 1")
        bins = np.minimum(ints, n_groups) - 1
        ranges = [(k, k) for k in range(1, n_groups + 1)]
        if not drop_above and np.any(ints > n_groups):
            ranges[-1] = (n_groups, math.inf)

    counts = np.bincount(bins, minlength=n_groups)
    mapping, ranges = _merge_small(counts.tolist(), ranges, min_group_size)
    if len(ranges) < 2:
        raise ValidationError(f"fewer than 2 nonempty {metric} groups after merging")
    return GroupPartition(metric=metric, nodes=nodes, group_of=mapping[bins], boundaries=ranges)


def metric_values(metric, graph, norm_ops, label_mask, alpha=0.1):
    """Per-node values of a grouping metric."""
    if metric == "degree":
        return np.asarray(graph.degrees)
    if metric == "spd":
        d = spd_to_labeled(graph, label_mask)
        if np.any(d == UNREACHABLE):
            warnings.warn("some nodes cannot reach a labeled node; they fall in the last spd group")
        return d
    if metric == "lps":
        return lps_scores(norm_ops, label_mask, alpha=alpha).scores
    raise ValidationError(f"metric must be one of {METRICS}")
