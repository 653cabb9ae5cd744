"""Propagation operators, label propagation and the two trainable heads.

An operator maps an ``n x k`` signal ``X`` to ``op(X)``. It can be a learned
structure ``B`` (dense or sparse), the identity, or the truncated recursion

    F <- F - step * (2 (F - X) + 2 lam (F - Ã F)),    F^0 = X

whose default step ``1 / (2 (1 + lam))`` gives ``F <- X/(1+lam) + lam/(1+lam) Ã F``,
i.e. personalized PageRank with teleport ``1 / (1 + lam)``.
"""
import copy
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F

from ._backend import thread_cap
from .errors import NumericalError, ValidationError

log = logging.getLogger(__name__)

OPERATOR_KINDS = ("identity", "dense", "sparse", "ppr_iterative")
HEAD_KINDS = ("none", "linear", "mlp2")


@dataclass(frozen=True)
class PropagationOperator:
    kind: str
    payload: object = None
    lam: float = 0.0
    steps: int = 0
    step_size: float = 0.0

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ValidationError(f"operator kind must be one of {OPERATOR_KINDS}")

    @classmethod
    def identity(cls, n):
        return cls("identity", payload=int(n))

    @classmethod
    def from_structure(cls, B):
        """Wrap a learned structure, an ndarray or a scipy sparse matrix."""
        if hasattr(B, "to_csr"):
            return cls("sparse", payload=B.to_csr())
        if hasattr(B, "values"):
            return cls("dense", payload=np.asarray(B.values, dtype=np.float64))
        if sp.issparse(B):
            return cls("sparse", payload=sp.csr_matrix(B))
        return cls("dense", payload=np.asarray(B, dtype=np.float64))

    @classmethod
    def ppr_iterative(cls, norm_adj, lam, steps, step_size=None):
        if lam < 0 or steps < 0:
            raise ValidationError("lam and steps must be non-negative")
        if step_size is None:
            step_size = 1.0 / (2.0 * (1.0 + lam))
        return cls("ppr_iterative", payload=sp.csr_matrix(norm_adj), lam=float(lam),
                   steps=int(steps), step_size=float(step_size))

    @property
    def n(self):
        if self.kind == "identity":
            return self.payload
        return self.payload.shape[0]

    def apply(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] != self.n:
            raise ValidationError(f"signal has {X.shape[0]} rows, operator expects {self.n}")
        if self.kind == "identity":
            return X.copy()
        if self.kind == "ppr_iterative":
            A, lam, g = self.payload, self.lam, self.step_size
            Fk = X.copy()
            for _ in range(self.steps):
                Fk = Fk - g * (2.0 * (Fk - X) + 2.0 * lam * (Fk - A @ Fk))
            return Fk
        return np.asarray(self.payload @ X)

    def torch_apply(self, dtype=torch.float32):
        """Return a differentiable ``X -> op(X)`` closure over torch tensors."""
        if self.kind == "identity":
            return lambda X: X
        if self.kind == "dense":
            M = torch.as_tensor(self.payload, dtype=dtype)
            return lambda X: M @ X
        M = _torch_sparse(self.payload, dtype)
        if self.kind == "sparse":
            return lambda X: M @ X
        lam, g, steps = self.lam, self.step_size, self.steps

        def run(X):
            Fk = X
            for _ in range(steps):
                Fk = Fk - g * (2.0 * (Fk - X) + 2.0 * lam * (Fk - M @ Fk))
            return Fk

        return run


def _torch_sparse(M, dtype):
    coo = sp.coo_matrix(M)
    idx = torch.as_tensor(np.vstack([coo.row, coo.col]).astype(np.int64))
    return torch.sparse_coo_tensor(idx, torch.as_tensor(coo.data, dtype=dtype), coo.shape,
                                   check_invariants=False).coalesce()


@dataclass
class Prediction:
    scores: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.labels is None:
            # np.argmax already returns the first (lowest-index) maximum
            self.labels = np.argmax(self.scores, axis=1).astype(np.int64)

    def accuracy(self, classes, nodes):
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) == 0:
            return math.nan
        return float(np.mean(self.labels[nodes] == np.asarray(classes)[nodes]))

    def save(self, path, scores_path=None, config=None):
        doc = {"labels": self.labels.tolist()}
        if scores_path is not None:
            with open(scores_path, "w", newline="") as fh:
                csv.writer(fh).writerows(self.scores.tolist())
            doc["scores_path"] = str(scores_path)
        if config is not None:
            doc["config"] = config
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        labels = np.asarray(doc["labels"], dtype=np.int64)
        if doc.get("scores_path"):
            scores = np.loadtxt(doc["scores_path"], delimiter=",", ndmin=2)
        else:
            scores = np.eye(int(labels.max()) + 1)[labels]
        return cls(scores=scores, labels=labels)


def propagate_labels(operator, label_mask, class_ids, n_classes=None):
    """Scores ``op(Y)`` where ``Y`` one-hot encodes the labeled nodes only."""
    mask = np.asarray(label_mask, dtype=bool)
    cls = np.asarray(class_ids, dtype=np.int64)
    if n_classes is None:
        n_classes = int(cls.max()) + 1
    Y = np.zeros((len(mask), n_classes))
    idx = np.flatnonzero(mask)
    Y[idx, cls[idx]] = 1.0
    return Prediction(scores=operator.apply(Y))


def influence_sum(B, label_mask, node_i):
    """``sum_{j labeled} B[i, j]``."""
    cols = np.flatnonzero(np.asarray(label_mask, dtype=bool))
    if hasattr(B, "to_csr"):
        B = B.to_csr()
    elif hasattr(B, "values"):
        B = B.values
    if sp.issparse(B):
        row = sp.csr_matrix(B).getrow(int(node_i))
        return float(row[:, cols].sum())
    return float(np.asarray(B)[int(node_i), cols].sum())


# ---------------------------------------------------------------------------
# trainable heads


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "mlp2"
    hidden: int = 64
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    max_epochs: int = 1000
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "mlp2"):
            raise ValidationError("trainable head kind must be 'linear' or 'mlp2'")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must lie in [0, 1)")


@dataclass
class ClassifierHead:
    kind: str
    arch: str
    weights: list
    train_cfg: dict = field(default_factory=dict)

    def save(self, path):
        write_head(self, path)


class _Net(torch.nn.Module):
    def __init__(self, arch, kind, d_in, hidden, n_out, dropout, prop):
        super().__init__()
        self.arch, self.kind, self.dropout, self.prop = arch, kind, dropout, prop
        if kind == "linear":
            self.layers = torch.nn.ModuleList([torch.nn.Linear(d_in, n_out)])
        else:
            self.layers = torch.nn.ModuleList(
                [torch.nn.Linear(d_in, hidden), torch.nn.Linear(hidden, n_out)]
            )

    def forward(self, X):
        h = X
        for k, layer in enumerate(self.layers):
            if h.is_sparse:
                h = torch.sparse.mm(_sparse_dropout(h, self.dropout, self.training), layer.weight.t())
            else:
                h = F.linear(F.dropout(h, self.dropout, self.training), layer.weight)
            # gcn: op(h) W + b, computed as op(h W) + b; appnp propagates only at the end
            if self.arch == "gcn":
                h = self.prop(h)
            h = h + layer.bias
            if k < len(self.layers) - 1:
                h = F.relu(h)
        if self.arch == "appnp":
            h = self.prop(h)
        return h


def _sparse_dropout(X, p, training):
    # zeros stay zero under dropout, so masking the stored values is equivalent
    if not training or p == 0:
        return X
    vals = X.values()
    keep = (torch.rand_like(vals) >= p).to(vals.dtype)
    return torch.sparse_coo_tensor(X.indices(), vals * keep / (1.0 - p), X.shape, check_invariants=False)


def _train(arch, operator, features, classes, split, cfg):
    train = np.asarray(split.train, dtype=np.int64)
    if len(train) == 0:
        raise ValidationError("training set is empty")
    X = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValidationError("features must be finite")
    if X.shape[0] != operator.n:
        raise ValidationError("feature rows differ from operator size")
    classes = np.asarray(classes, dtype=np.int64)
    n_classes = int(classes.max()) + 1

    cap = thread_cap()
    if cap:
        torch.set_num_threads(cap)
    torch.manual_seed(cfg.seed)
    Xt = torch.as_tensor(X, dtype=torch.float32)
    if np.count_nonzero(X) < 0.1 * X.size:
        Xt = Xt.to_sparse().coalesce()
    yt = torch.as_tensor(classes)
    tr = torch.as_tensor(train)
    val = np.asarray(split.val, dtype=np.int64)
    net = _Net(arch, cfg.kind, X.shape[1], cfg.hidden, n_classes, cfg.dropout, operator.torch_apply())
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    best_acc, best_state, best_epoch, wait = -1.0, None, 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        opt.zero_grad()
        loss = F.cross_entropy(net(Xt)[tr], yt[tr])
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite training loss at epoch {epoch}; lower the learning rate")
        loss.backward()
        opt.step()

        net.eval()
        with torch.no_grad():
            pred = net(Xt).argmax(dim=1).numpy()
        eval_nodes = val if len(val) else train
        acc = float(np.mean(pred[eval_nodes] == classes[eval_nodes]))
        if acc > best_acc:
            best_acc, best_epoch, wait = acc, epoch, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            wait += 1
            if wait >= cfg.patience:
                break

    net.load_state_dict(best_state)
    net.eval()
    with torch.no_grad():
        scores = net(Xt).double().numpy()
    weights = [p.detach().double().numpy().copy() for p in net.parameters()]
    meta = asdict(cfg) | {"arch": arch, "best_epoch": best_epoch, "best_val_acc": best_acc, "epochs": epoch}
    log.info("%s head: best val acc %.4f at epoch %d", arch, best_acc, best_epoch)
    return ClassifierHead(kind=cfg.kind, arch=arch, weights=weights, train_cfg=meta), Prediction(scores=scores)


def train_appnp_head(operator, features, classes, split, head_cfg=HeadConfig()):
    """Fit ``Y = op(f(X))`` with ``f`` a linear map or a 2-layer perceptron.

    Full-batch Adam on the training rows; the returned parameters are those
    with the best validation accuracy (earliest on ties).
    """
    return _train("appnp", operator, features, classes, split, head_cfg)


def train_gcn_head(operator, features, classes, split, head_cfg=HeadConfig()):
    """Fit ``H = relu(op(X W0)); Y = op(H W1)`` (``W1`` dropped for a linear head)."""
    return _train("gcn", operator, features, classes, split, head_cfg)


# ---------------------------------------------------------------------------
# head checkpoint: 16-byte header, then per array ndim, dims and float64 data,
# then an optional length-prefixed UTF-8 JSON trailer with the training config

_MAGIC = b"LPSLHEAD"
_VERSION = 1
_KIND_CODES = {("appnp", "linear"): 1, ("appnp", "mlp2"): 2, ("gcn", "linear"): 3, ("gcn", "mlp2"): 4}


def write_head(head, path):
    code = _KIND_CODES[(head.arch, head.kind)]
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<HHI", _VERSION, code, len(head.weights)))
        for w in head.weights:
            w = np.ascontiguousarray(w, dtype="<f8")
            fh.write(struct.pack("<I", w.ndim))
            fh.write(struct.pack(f"<{w.ndim}Q", *w.shape))
            fh.write(w.tobytes(order="C"))
        trailer = json.dumps(head.train_cfg, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(trailer)) + trailer)


def read_head(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != _MAGIC:
        raise ValidationError(f"{path}: not a head checkpoint")
    version, code, count = struct.unpack_from("<HHI", data, 8)
    if version != _VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    arch, kind = {v: k for k, v in _KIND_CODES.items()}[code]
    pos, weights = 16, []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        weights.append(np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy())
        pos += 8 * size
    train_cfg = {}
    if len(data) >= pos + 4:
        (length,) = struct.unpack_from("<I", data, pos)
        train_cfg = json.loads(data[pos + 4:pos + 4 + length].decode())
    return ClassifierHead(kind=kind, arch=arch, weights=weights, train_cfg=train_cfg)
