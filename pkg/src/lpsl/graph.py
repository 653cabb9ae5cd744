"""Graph ingestion, symmetric normalization and seeded splits.

File formats
------------
edge list
    UTF-8 text, one edge per line, ``u v`` or ``u v w``, whitespace separated,
    ``#`` starts a comment, 0-based dense node ids. Missing weights are 1.0.
features
    CSV without header, one row per node id in order (``.gz`` accepted).
labels
    lines ``node_id class_id``.
split
    JSON ``{"seed": int, "train": [...], "val": [...], "test": [...]}``.

Splits use numpy's ``PCG64`` bit generator seeded directly with the split
seed. Classes are visited in ascending class id; for each class the sorted
member ids are permuted with ``Generator.permutation`` and the first
``per_class`` are taken. The remaining nodes (sorted) are permuted once; the
first ``n_val`` become validation and the next ``n_test`` test nodes.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError

SELF_LOOP_POLICIES = ("reject", "add")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Graph:
    """Undirected weighted graph in CSR form (both arc directions stored)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    degrees: np.ndarray

    @classmethod
    def from_edges(cls, n, u, v, w=None):
        """Build a graph from an edge list, merging mirrored duplicates.

        ``(u, v, w)`` and ``(v, u, w)`` describe the same undirected edge.
        Listing a pair twice with different weights is an error.
        """
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        w = np.ones(len(u)) if w is None else np.asarray(w, dtype=np.float64)
        if not (len(u) == len(v) == len(w)):
            raise ValidationError("edge arrays differ in length")
        if len(u) and (min(u.min(), v.min()) < 0 or max(u.max(), v.max()) >= n):
            raise ValidationError(f"node id out of range [0, {n})")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValidationError("edge weights must be finite and non-negative")

        lo, hi = np.minimum(u, v), np.maximum(u, v)
        key = lo * n + hi
        order = np.argsort(key, kind="stable")
        key, w = key[order], w[order]
        uniq, start = np.unique(key, return_index=True)
        if len(key):
            wmin = np.minimum.reduceat(w, start)
            wmax = np.maximum.reduceat(w, start)
            bad = np.flatnonzero(wmin != wmax)
            if len(bad):
                a, b = divmod(int(uniq[bad[0]]), n)
                raise ValidationError(f"edge ({a}, {b}) listed with conflicting weights")
            w = w[start]
        lo, hi = uniq // n, uniq % n

        loop = lo == hi
        rows = np.concatenate([lo, hi[~loop]])
        cols = np.concatenate([hi, lo[~loop]])
        vals = np.concatenate([w, w[~loop]])
        A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        A.sort_indices()
        degrees = np.asarray(A.sum(axis=1)).ravel()
        return cls(
            n=int(n),
            indptr=_frozen(A.indptr, np.int64),
            indices=_frozen(A.indices, np.int64),
            weights=_frozen(A.data, np.float64),
            degrees=_frozen(degrees, np.float64),
        )

    @property
    def adjacency(self):
        return sp.csr_matrix((self.weights, self.indices, self.indptr), shape=(self.n, self.n))

    @property
    def n_edges(self):
        """Number of undirected edges (self-loops count once)."""
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        return int(np.count_nonzero(rows <= self.indices))

    def edge_list(self):
        """Undirected edges as ``(u, v, w)`` arrays with ``u <= v``."""
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        keep = rows <= self.indices
        return rows[keep], self.indices[keep], self.weights[keep]


@dataclass(frozen=True)
class NormalizedOperators:
    """``norm_adj = D^-1/2 A D^-1/2`` and ``norm_lap = I - norm_adj`` (CSR)."""

    norm_adj: sp.csr_matrix
    norm_lap: sp.csr_matrix
    degrees: np.ndarray

    @property
    def n(self):
        return self.norm_adj.shape[0]


@dataclass(frozen=True)
class Dataset:
    graph: Graph
    features: np.ndarray
    classes: np.ndarray
    masks: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return int(self.classes.max()) + 1 if len(self.classes) else 0


@dataclass(frozen=True)
class SplitAssignment:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    per_class: float

    def to_json(self):
        return {
            "seed": int(self.seed),
            "per_class": self.per_class,
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
        }

    @classmethod
    def from_json(cls, doc):
        try:
            parts = [np.asarray(doc[k], dtype=np.int64) for k in ("train", "val", "test")]
            seed = int(doc["seed"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed split document: {exc}") from exc
        for a, b in ((0, 1), (0, 2), (1, 2)):
            if np.intersect1d(parts[a], parts[b]).size:
                raise ValidationError("split parts overlap")
        return cls(*parts, seed=seed, per_class=doc.get("per_class"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# readers / writers


def read_edge_list(path, n=None):
    """Parse an edge-list file. ``n`` defaults to ``max id + 1``."""
    us, vs, ws = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ValidationError(f"{path}:{lineno}: expected 'u v' or 'u v w'")
            try:
                us.append(int(parts[0]))
                vs.append(int(parts[1]))
                ws.append(float(parts[2]) if len(parts) == 3 else 1.0)
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    if n is None:
        n = max(max(us, default=-1), max(vs, default=-1)) + 1
    return Graph.from_edges(n, us, vs, ws)


def write_edge_list(graph, path):
    u, v, w = graph.edge_list()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={graph.n}\n")
        for a, b, c in zip(u.tolist(), v.tolist(), w.tolist()):
            fh.write(f"{a} {b} {c!r}\n")


def read_labels(path):
    """Return ``(node_ids, class_ids)`` from a ``node_id class_id`` file."""
    try:
        table = np.loadtxt(path, dtype=np.int64, comments="#", ndmin=2)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if table.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    if table.shape[1] != 2:
        raise ValidationError(f"{path}: expected two columns 'node_id class_id'")
    if np.any(table < 0):
        raise ValidationError(f"{path}: negative node or class id")
    return table[:, 0], table[:, 1]


def read_features(path):
    try:
        return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric feature ({exc})") from exc


def load_dataset(graph_path, features_path, labels_path, self_loop_policy="reject"):
    features = read_features(features_path)
    n = features.shape[0]
    graph = read_edge_list(graph_path, n=n)
    nodes, cls = read_labels(labels_path)
    if np.any(nodes >= n):
        raise ValidationError(f"label node id out of range [0, {n})")
    classes = np.full(n, -1, dtype=np.int64)
    classes[nodes] = cls
    missing = np.flatnonzero(classes < 0)
    if len(missing):
        raise ValidationError(f"{len(missing)} nodes have no label (first: {missing[0]})")
    if self_loop_policy == "reject":
        _check_degrees(graph)
    return Dataset(graph=graph, features=features, classes=classes)


def _check_degrees(graph):
    zero = np.flatnonzero(graph.degrees <= 0)
    if len(zero):
        raise ValidationError(
            f"{len(zero)} zero-degree nodes (first: {zero[0]}); use self_loop_policy='add'"
        )


def label_mask(n, nodes):
    """Boolean indicator of the labeled nodes (the diagonal of T)."""
    mask = np.zeros(n, dtype=bool)
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) and (nodes.min() < 0 or nodes.max() >= n):
        raise ValidationError(f"labeled node id out of range [0, {n})")
    mask[nodes] = True
    return mask


# ---------------------------------------------------------------------------
# normalization


def symmetric_normalize(graph, self_loop_policy="reject"):
    """Return the normalized adjacency and Laplacian of ``graph``.

    With ``self_loop_policy="add"`` zero-degree nodes receive a unit self-loop
    first; with ``"reject"`` they raise :class:`ValidationError`.
    """
    if self_loop_policy not in SELF_LOOP_POLICIES:
        raise ValidationError(f"self_loop_policy must be one of {SELF_LOOP_POLICIES}")
    A = graph.adjacency
    deg = np.array(graph.degrees)
    zero = deg <= 0
    if zero.any():
        if self_loop_policy == "reject":
            _check_degrees(graph)
        A = (A + sp.diags(zero.astype(np.float64))).tocsr()
        deg = np.asarray(A.sum(axis=1)).ravel()
    A = A.tocoo()
    vals = A.data / np.sqrt(deg[A.row] * deg[A.col])
    n = graph.n
    norm_adj = sp.csr_matrix((vals, (A.row, A.col)), shape=(n, n))
    norm_adj.sort_indices()
    norm_lap = (sp.identity(n, format="csr") - norm_adj).tocsr()
    norm_lap.sort_indices()
    return NormalizedOperators(norm_adj=norm_adj, norm_lap=norm_lap, degrees=_frozen(deg, np.float64))


# ---------------------------------------------------------------------------
# splits


def _count(size, total, what):
    if isinstance(size, float) and 0 < size < 1:
        return int(math.floor(size * total))
    if float(size) != int(size) or int(size) < 0:
        raise ValidationError(f"{what} must be a non-negative integer or a fraction in (0, 1)")
    return int(size)


def make_split(dataset, per_class=20, n_val=None, n_test=None, seed=0):
    """Sample train/val/test node sets.

    ``per_class`` is either a count of training nodes per class or a fraction
    in (0, 1) of each class. ``n_val``/``n_test`` are counts or fractions of
    ``n``; they default to 500/1000 in count mode and to 0.2 in fraction mode.
    """
    classes = np.asarray(getattr(dataset, "classes", dataset), dtype=np.int64)
    n = len(classes)
    fractional = isinstance(per_class, float) and 0 < per_class < 1
    if n_val is None:
        n_val = 0.2 if fractional else 500
    if n_test is None:
        n_test = 0.2 if fractional else 1000
    nv, nt = _count(n_val, n, "n_val"), _count(n_test, n, "n_test")

    rng = np.random.Generator(np.random.PCG64(seed))
    train = []
    for k in range(int(classes.max()) + 1 if n else 0):
        members = np.flatnonzero(classes == k)
        take = _count(per_class, len(members), "per_class")
        if len(members) < take:
            raise ValidationError(f"class {k} has {len(members)} nodes, fewer than {take}")
        train.append(rng.permutation(members)[:take])
    train = np.sort(np.concatenate(train)) if train else np.zeros(0, np.int64)

    rest = np.setdiff1d(np.arange(n), train)
    if len(rest) < nv + nt:
        raise ValidationError(f"only {len(rest)} nodes left for {nv} val + {nt} test")
    perm = rng.permutation(rest)
    return SplitAssignment(
        train=train,
        val=np.sort(perm[:nv]),
        test=np.sort(perm[nv:nv + nt]),
        seed=int(seed),
        per_class=per_class,
    )
