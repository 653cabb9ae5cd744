"""Learning the label-position-unbiased propagation structure ``B``.

The problem is

    min_B  ||I - B||_F^2 + lam * tr(B^T L B) [+ beta * ||B||_1]
    s.t.   B t = c 1

with ``L`` the normalized Laplacian and ``t`` the labeled-node indicator.
:func:`solve_dense` runs dual ascent on the augmented Lagrangian with a few
gradient steps per multiplier update; :func:`solve_sparse` runs proximal block
coordinate descent over contiguous column blocks.

Both solvers take gradient steps through :func:`lpsl.kernels.grad_step`, so
``solve_sparse`` with ``beta=0`` and one full-width block follows exactly the
same floating-point trajectory as ``solve_dense``.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import kernels
from ._backend import thread_cap
from .errors import DensityError, DivergenceError, NumericalError, ValidationError
from .graph import NormalizedOperators

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters of both solvers.

    ``rho = 0`` disables the constraint: the multiplier stays at zero and the
    solver stops on ``grad_tol`` (max-abs gradient) instead of the constraint
    residual. With ``deterministic=False`` the sparse solver updates blocks
    concurrently against a sweep-start snapshot of the residual.
    """

    lam: float = 10.0
    c: float = 1.0
    rho: float = 0.01
    gamma: float = 0.01
    beta: float = 1e-5
    block_size: int = 64
    inner_steps: int = 10
    outer_tol: float = 1e-3
    max_outer: int = 500
    deterministic: bool = True
    grad_tol: float = 1e-8
    dense_cap: int = 5000
    max_density: float = 1.0
    divergence_patience: int = 5
    divergence_factor: float = 2.0

    def __post_init__(self):
        for name in ("lam", "c", "rho", "gamma", "beta", "outer_tol", "grad_tol", "max_density", "divergence_factor"):
            object.__setattr__(self, name, float(getattr(self, name)))
        checks = [
            (self.lam >= 0, "lam must be >= 0"),
            (self.rho >= 0, "rho must be >= 0"),
            (self.gamma > 0, "gamma must be > 0"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.block_size >= 1, "block_size must be >= 1"),
            (self.inner_steps >= 1, "inner_steps must be >= 1"),
            (self.max_outer >= 1, "max_outer must be >= 1"),
            (0 < self.max_density <= 1, "max_density must lie in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)

    @property
    def constrained(self):
        return self.rho > 0

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class DualState:
    y: np.ndarray
    residual: np.ndarray


@dataclass
class DenseStructure:
    n: int
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_dense(self):
        return self.values

    def save(self, path):
        cfg = self.meta.get("config", {})
        with open(path, "w") as fh:
            fh.write(_header(self.n, None, cfg) + "\n")
            fh.write("#meta " + json.dumps(_jsonable(self.meta), sort_keys=True) + "\n")
            for row in self.values:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


@dataclass
class SparseStructure:
    """Coordinate triples sorted by ``(col, row)`` without explicit zeros."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, M, meta=None):
        M = sp.csc_matrix(M)
        M.eliminate_zeros()
        M.sort_indices()
        coo = M.tocoo()
        order = np.lexsort((coo.row, coo.col))
        return cls(
            n=M.shape[0],
            rows=coo.row[order].astype(np.int64),
            cols=coo.col[order].astype(np.int64),
            vals=coo.data[order].astype(np.float64),
            meta=meta or {},
        )

    @property
    def nnz(self):
        return len(self.vals)

    def to_csr(self):
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(self.n, self.n))

    def to_dense(self):
        return self.to_csr().toarray()

    def save(self, path):
        cfg = self.meta.get("config", {})
        with open(path, "w") as fh:
            fh.write(_header(self.n, self.nnz, cfg) + "\n")
            fh.write("#meta " + json.dumps(_jsonable(self.meta), sort_keys=True) + "\n")
            for i, j, v in zip(self.rows.tolist(), self.cols.tolist(), self.vals.tolist()):
                fh.write(f"{i} {j} {v:.17g}\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _header(n, nnz, cfg):
    parts = [f"#lpsl n={n}"]
    if nnz is not None:
        parts.append(f"nnz={nnz}")
    parts += [
        f"lambda={cfg.get('lam', float('nan'))!r}",
        f"c={cfg.get('c', float('nan'))!r}",
        f"beta={cfg.get('beta', float('nan'))!r}",
    ]
    return " ".join(parts)


def load_structure(path):
    """Read a structure file written by ``DenseStructure.save`` or ``SparseStructure.save``."""
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("#lpsl "):
            raise ValidationError(f"{path}: missing '#lpsl' header")
        fields = dict(tok.split("=", 1) for tok in first.split()[1:])
        meta = {}
        body = []
        for line in fh:
            if line.startswith("#meta "):
                meta = json.loads(line[6:])
            elif line.startswith("#") or not line.strip():
                continue
            else:
                body.append(line)
    n = int(fields["n"])
    if "nnz" in fields:
        table = np.loadtxt(body, ndmin=2) if body else np.zeros((0, 3))
        if len(table) != int(fields["nnz"]):
            raise ValidationError(f"{path}: header nnz={fields['nnz']} but {len(table)} entries")
        return SparseStructure(
            n=n,
            rows=table[:, 0].astype(np.int64),
            cols=table[:, 1].astype(np.int64),
            vals=table[:, 2].astype(np.float64),
            meta=meta,
        )
    values = np.loadtxt(body, ndmin=2)
    if values.shape != (n, n):
        raise ValidationError(f"{path}: expected {n}x{n} values, got {values.shape}")
    return DenseStructure(n=n, values=values, meta=meta)


# ---------------------------------------------------------------------------
# objective pieces


def _adjacency(ops):
    if isinstance(ops, NormalizedOperators):
        return ops.norm_adj
    L = sp.csr_matrix(ops)
    A = (sp.identity(L.shape[0], format="csr") - L).tocsr()
    A.sort_indices()
    return A


def _laplacian(ops):
    if isinstance(ops, NormalizedOperators):
        return ops.norm_lap
    return sp.csr_matrix(ops)


def _labeled(label_mask):
    mask = np.asarray(label_mask, dtype=bool)
    return mask, np.flatnonzero(mask)


def soft_threshold(x, t):
    """``sign(x) * max(|x| - t, 0)``, elementwise for arrays."""
    if t < 0:
        raise ValidationError(f"threshold must be >= 0, got {t}")
    if np.ndim(x) == 0:
        return float(np.sign(x) * max(abs(x) - t, 0.0))
    return kernels.soft_threshold_array(np.asarray(x, dtype=np.float64), t)


def constraint_residual(B, label_mask, c):
    """``B t - c 1``: row sums of ``B`` over labeled columns minus ``c``."""
    _, idx = _labeled(label_mask)
    if sp.issparse(B):
        return np.asarray(sp.csc_matrix(B)[:, idx].sum(axis=1)).ravel() - c
    return kernels.labeled_row_sums(np.asarray(B, dtype=np.float64), idx) - c


def lagrangian_value(B, y, ops, label_mask, config):
    """Augmented Lagrangian ``||I-B||^2 + lam tr(B^T L B) + y.r + rho/2 ||r||^2``."""
    B = np.asarray(B, dtype=np.float64)
    n = B.shape[0]
    A = _adjacency(ops)
    if B.shape != (n, n) or A.shape != (n, n) or len(y) != n:
        raise ValidationError("shape mismatch between B, y and the Laplacian")
    fro, smooth, _ = kernels.objective_terms(A, B, 0)
    r = constraint_residual(B, label_mask, config.c)
    return fro + config.lam * smooth + float(y @ r) + 0.5 * config.rho * float(r @ r)


def block_gradient(B, y, ops, label_mask, config, block_j):
    """Gradient of the augmented Lagrangian w.r.t. column block ``block_j``.

    Blocks are contiguous ranges of ``config.block_size`` columns. The
    constraint residual is taken from the full (live) ``B``.
    """
    B = np.asarray(B, dtype=np.float64)
    n = B.shape[1]
    d = config.block_size
    a = block_j * d
    if block_j < 0 or a >= n:
        raise ValidationError(f"block index {block_j} out of range")
    b = min(a + d, n)
    return _grad_cols(B, a, b, y, _adjacency(ops), label_mask, config)


def lagrangian_gradient(B, y, ops, label_mask, config):
    """Full gradient ``2(B-I) + 2 lam L B + y t^T + rho (B t - c 1) t^T``."""
    B = np.asarray(B, dtype=np.float64)
    return _grad_cols(B, 0, B.shape[1], y, _adjacency(ops), label_mask, config)


def _grad_cols(B, a, b, y, A, label_mask, config):
    mask, _ = _labeled(label_mask)
    t = mask.astype(np.float64)
    r = constraint_residual(B, mask, config.c)
    return kernels.grad_block(A, B[:, a:b], a, config.lam, np.asarray(y, np.float64), r, config.rho, t[a:b])


def closed_form_unconstrained(ops, lam):
    """``(I + lam L)^-1`` by a dense solve."""
    L = _laplacian(ops).toarray()
    n = L.shape[0]
    M = np.eye(n) + lam * L
    values = np.linalg.solve(M, np.eye(n))
    return DenseStructure(n=n, values=values, meta={"lam": lam, "method": "closed_form"})


# ---------------------------------------------------------------------------
# solvers


class _Monitor:
    """Tracks the objective across outer rounds and raises on blow-up."""

    def __init__(self, config):
        self.config = config
        self.values = []
        self.grew = 0

    def push(self, value):
        if not math.isfinite(value):
            raise DivergenceError("objective became non-finite; reduce gamma")
        if self.values:
            prev = self.values[-1]
            if value > prev and value - prev > (self.config.divergence_factor - 1.0) * abs(prev):
                self.grew += 1
            else:
                self.grew = 0
            if self.grew >= self.config.divergence_patience:
                raise DivergenceError(
                    f"objective grew {self.grew} consecutive rounds ({prev:.4g} -> {value:.4g}); reduce gamma"
                )
        self.values.append(value)


def solve_dense(ops, label_mask, config=SolverConfig(), callback=None):
    """Dual ascent on the augmented Lagrangian with dense ``B``.

    Each outer round takes ``inner_steps`` gradient steps of size ``gamma`` on
    ``B`` and then updates ``y <- y + rho (B t - c 1)``.
    """
    A = _adjacency(ops)
    n = A.shape[0]
    if n > config.dense_cap:
        raise ValidationError(f"n={n} exceeds dense_cap={config.dense_cap}; use solve_sparse")
    mask, _ = _labeled(label_mask)
    if len(mask) != n:
        raise ValidationError("label mask length differs from node count")
    t = mask.astype(np.float64)
    rho = config.rho if config.constrained else 0.0

    B = np.eye(n)
    y = np.zeros(n)
    monitor = _Monitor(config)
    stop = "max_outer"
    gmax = math.inf
    for k in range(1, config.max_outer + 1):
        for _ in range(config.inner_steps):
            r = constraint_residual(B, mask, config.c)
            B, gmax = kernels.grad_step(A, B, 0, config.lam, y, r, rho, t, config.gamma)
        r = constraint_residual(B, mask, config.c)
        if config.constrained:
            y += config.rho * r
        res = float(np.max(np.abs(r)))
        value = lagrangian_value(B, y, ops, mask, replace(config, rho=rho))
        monitor.push(value)
        if callback is not None:
            callback(k, B, y, res)
        if config.constrained and res <= config.outer_tol:
            stop = "tolerance"
            break
        if not config.constrained and gmax <= config.grad_tol:
            stop = "gradient"
            break
    if not np.all(np.isfinite(B)):
        raise NumericalError("non-finite entries in B")
    meta = {
        "config": asdict(config),
        "iterations": k,
        "residual_inf": res,
        "objective": monitor.values[-1],
        "grad_inf": gmax,
        "stop": stop,
        "y": y,
    }
    log.info("solve_dense: %d rounds, residual %.3e, stop=%s", k, res, stop)
    return DenseStructure(n=n, values=B, meta=meta)


def solve_sparse(ops, label_mask, config=SolverConfig(), callback=None):
    """Proximal block coordinate descent with soft thresholding.

    ``B`` starts at ``I`` and ``y`` at zero. Each sweep visits the column
    blocks in order; a block takes ``inner_steps`` gradient steps and is then
    soft-thresholded at ``beta / rho``. The multiplier is updated once per
    sweep. Blocks other than the one being updated are kept as CSC matrices.
    """
    A = _adjacency(ops)
    n = A.shape[0]
    mask, _ = _labeled(label_mask)
    if len(mask) != n:
        raise ValidationError("label mask length differs from node count")
    if config.beta > 0 and not config.constrained:
        raise ValidationError("beta > 0 needs rho > 0 (threshold is beta / rho)")
    t = mask.astype(np.float64)
    rho = config.rho if config.constrained else 0.0
    thresh = config.beta / config.rho if config.beta > 0 else 0.0

    spans = [(a, min(a + config.block_size, n)) for a in range(0, n, config.block_size)]
    local = [np.flatnonzero(mask[a:b]) for a, b in spans]
    single = len(spans) == 1
    if single:
        blocks = [np.eye(n)]
    else:
        blocks = [sp.csc_matrix(sp.identity(n, format="csc")[:, a:b]) for a, b in spans]
    sums = [_block_sums(blk, loc) for blk, loc in zip(blocks, local)]

    def update(k, W, r_fixed, y):
        a, b = spans[k]
        if r_fixed is None:
            others = None if single else _sum_except(sums, k)
        gmax = 0.0
        for _ in range(config.inner_steps):
            if r_fixed is not None:
                r = r_fixed
            elif single:
                r = kernels.labeled_row_sums(W, local[k]) - config.c
            else:
                r = (others + kernels.labeled_row_sums(W, local[k])) - config.c
            W, gmax = kernels.grad_step(A, W, a, config.lam, y, r, rho, t[a:b], config.gamma)
        if thresh > 0:
            W = kernels.soft_threshold_array(W, thresh)
        return W, gmax

    y = np.zeros(n)
    monitor = _Monitor(config)
    stop = "max_outer"
    gmax = math.inf
    workers = thread_cap() or 1
    for sweep in range(1, config.max_outer + 1):
        gmax = 0.0
        if config.deterministic or single:
            for k in range(len(spans)):
                W = blocks[k] if single else blocks[k].toarray()
                W, g = update(k, W, None, y)
                gmax = max(gmax, g)
                _store(blocks, sums, k, W, local[k], single)
                _check_density(blocks, n, config)
        else:
            r_snap = sum(sums) - config.c
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(lambda k: update(k, blocks[k].toarray(), r_snap, y), range(len(spans))))
            for k, (W, g) in enumerate(results):
                gmax = max(gmax, g)
                _store(blocks, sums, k, W, local[k], single)
            _check_density(blocks, n, config)

        r = sums[0] - config.c if single else sum(sums) - config.c
        if config.constrained:
            y += config.rho * r
        res = float(np.max(np.abs(r)))
        value = _sparse_objective(blocks, spans, y, r, A, config, rho)
        monitor.push(value)
        if callback is not None:
            callback(sweep, blocks, y, res)
        if config.constrained and res <= config.outer_tol:
            stop = "tolerance"
            break
        if not config.constrained and gmax <= config.grad_tol:
            stop = "gradient"
            break

    M = blocks[0] if single else sp.hstack(blocks, format="csc")
    out = SparseStructure.from_matrix(M)
    out.meta = {
        "config": asdict(config),
        "sweeps": sweep,
        "residual_inf": res,
        "objective": monitor.values[-1],
        "grad_inf": gmax,
        "nnz": out.nnz,
        "density": out.nnz / float(n * n),
        "stop": stop,
        "y": y,
    }
    if not np.all(np.isfinite(out.vals)):
        raise NumericalError("non-finite entries in B")
    log.info("solve_sparse: %d sweeps, residual %.3e, nnz %d, stop=%s", sweep, res, out.nnz, stop)
    return out


def _block_sums(blk, loc):
    if sp.issparse(blk):
        return np.asarray(blk[:, loc].sum(axis=1)).ravel()
    return kernels.labeled_row_sums(blk, loc)


def _sum_except(sums, k):
    total = np.zeros_like(sums[0])
    for m, s in enumerate(sums):
        if m != k:
            total += s
    return total


def _store(blocks, sums, k, W, loc, single):
    if single:
        blocks[k] = W
        sums[k] = kernels.labeled_row_sums(W, loc)
    else:
        blocks[k] = sp.csc_matrix(W)
        sums[k] = kernels.labeled_row_sums(W, loc)


def _check_density(blocks, n, config):
    if config.max_density >= 1.0:
        return
    nnz = sum(b.nnz if sp.issparse(b) else np.count_nonzero(b) for b in blocks)
    if nnz > config.max_density * n * n:
        raise DensityError(f"B density {nnz / (n * n):.3f} exceeds max_density={config.max_density}")


def _sparse_objective(blocks, spans, y, r, A, config, rho):
    fro = smooth = l1 = 0.0
    for blk, (a, b) in zip(blocks, spans):
        W = blk.toarray() if sp.issparse(blk) else blk
        f, s, q = kernels.objective_terms(A, W, a)
        fro += f
        smooth += s
        l1 += q
    return fro + config.lam * smooth + config.beta * l1 + float(y @ r) + 0.5 * rho * float(r @ r)
