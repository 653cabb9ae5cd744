"""Hot numeric kernels with numba and numpy implementations.

Each kernel exists twice: ``*_numba`` (``@njit``) and ``*_numpy`` (numpy/scipy).
The public names bind to one of them at import time according to
``LPSL_BACKEND`` (see :mod:`lpsl._backend`). Both implementations accumulate
sparse products in CSR storage order, so within a backend the result of a
column block never depends on how many other columns are processed with it.
"""
import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from ._backend import HAVE_NUMBA, USE_NUMBA, apply_thread_cap

UNREACHABLE = np.iinfo(np.int64).max


# ---------------------------------------------------------------------------
# numpy / scipy path


def spmm_numpy(A, X):
    """``A @ X`` for CSR ``A`` and dense ``X``."""
    return np.asarray(A @ X)


def grad_block_numpy(A, Bb, col0, lam, y, r, rho, tb):
    AB = A @ Bb
    D = np.array(Bb, dtype=np.float64, copy=True)
    cols = np.arange(Bb.shape[1])
    D[col0 + cols, cols] -= 1.0
    return (
        2.0 * D
        + 2.0 * lam * (Bb - AB)
        + y[:, None] * tb[None, :]
        + rho * (r[:, None] * tb[None, :])
    )


def grad_step_numpy(A, Bb, col0, lam, y, r, rho, tb, gamma):
    """One gradient step ``Bb - gamma * grad``; returns ``(new, grad_max_abs)``."""
    G = grad_block_numpy(A, Bb, col0, lam, y, r, rho, tb)
    return Bb - gamma * G, float(np.max(np.abs(G)))


def objective_terms_numpy(A, Bb, col0):
    """``(||Bb - I_blk||_F^2, sum(Bb * (Bb - A Bb)), sum|Bb|)``."""
    D = np.array(Bb, dtype=np.float64, copy=True)
    cols = np.arange(Bb.shape[1])
    D[col0 + cols, cols] -= 1.0
    return float(np.sum(D * D)), float(np.sum(Bb * (Bb - A @ Bb))), float(np.sum(np.abs(Bb)))


def labeled_row_sums_numpy(Bb, cols):
    if len(cols) == 0:
        return np.zeros(Bb.shape[0])
    return Bb[:, cols].sum(axis=1)


def soft_threshold_numpy(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def bfs_numpy(indptr, indices, sources):
    n = len(indptr) - 1
    dist = np.full(n, UNREACHABLE, dtype=np.int64)
    if len(sources) == 0:
        return dist
    A = sp.csr_matrix((np.ones(len(indices)), indices, indptr), shape=(n, n))
    d = csgraph.dijkstra(A, directed=False, indices=sources, unweighted=True, min_only=True)
    finite = np.isfinite(d)
    dist[finite] = d[finite].astype(np.int64)
    return dist


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:
    from numba import njit, prange

    @njit(parallel=True, cache=True)
    def _spmm_nb(indptr, indices, data, X):
        n = indptr.shape[0] - 1
        d = X.shape[1]
        out = np.zeros((n, d))
        for i in prange(n):
            for p in range(indptr[i], indptr[i + 1]):
                a = data[p]
                k = indices[p]
                for j in range(d):
                    out[i, j] += a * X[k, j]
        return out

    @njit(parallel=True, cache=True)
    def _grad_block_nb(indptr, indices, data, Bb, col0, lam, y, r, rho, tb):
        n, d = Bb.shape
        g = np.empty((n, d))
        two_lam = 2.0 * lam
        for i in prange(n):
            acc = np.zeros(d)
            for p in range(indptr[i], indptr[i + 1]):
                a = data[p]
                k = indices[p]
                for j in range(d):
                    acc[j] += a * Bb[k, j]
            for j in range(d):
                b = Bb[i, j]
                delta = 1.0 if i == col0 + j else 0.0
                g[i, j] = (
                    2.0 * (b - delta)
                    + two_lam * (b - acc[j])
                    + y[i] * tb[j]
                    + rho * (r[i] * tb[j])
                )
        return g

    @njit(parallel=True, cache=True)
    def _grad_step_nb(indptr, indices, data, Bb, col0, lam, y, r, rho, tb, gamma):
        n, d = Bb.shape
        out = np.empty((n, d))
        rowmax = np.zeros(n)
        two_lam = 2.0 * lam
        for i in prange(n):
            acc = np.zeros(d)
            for p in range(indptr[i], indptr[i + 1]):
                a = data[p]
                k = indices[p]
                for j in range(d):
                    acc[j] += a * Bb[k, j]
            m = 0.0
            for j in range(d):
                b = Bb[i, j]
                delta = 1.0 if i == col0 + j else 0.0
                g = (
                    2.0 * (b - delta)
                    + two_lam * (b - acc[j])
                    + y[i] * tb[j]
                    + rho * (r[i] * tb[j])
                )
                out[i, j] = b - gamma * g
                if abs(g) > m:
                    m = abs(g)
            rowmax[i] = m
        return out, rowmax.max()

    @njit(parallel=True, cache=True)
    def _objective_terms_nb(indptr, indices, data, Bb, col0):
        n, d = Bb.shape
        fro = np.zeros(n)
        smooth = np.zeros(n)
        l1 = np.zeros(n)
        for i in prange(n):
            acc = np.zeros(d)
            for p in range(indptr[i], indptr[i + 1]):
                a = data[p]
                k = indices[p]
                for j in range(d):
                    acc[j] += a * Bb[k, j]
            f = 0.0
            s = 0.0
            q = 0.0
            for j in range(d):
                b = Bb[i, j]
                e = b - 1.0 if i == col0 + j else b
                f += e * e
                s += b * (b - acc[j])
                q += abs(b)
            fro[i] = f
            smooth[i] = s
            l1[i] = q
        return fro.sum(), smooth.sum(), l1.sum()

    @njit(cache=True)
    def _labeled_row_sums_nb(Bb, cols):
        n = Bb.shape[0]
        out = np.zeros(n)
        for i in range(n):
            s = 0.0
            for c in cols:
                s += Bb[i, c]
            out[i] = s
        return out

    @njit(cache=True)
    def _soft_threshold_nb(x, t):
        flat = x.ravel()
        out = np.empty_like(flat)
        for k in range(flat.shape[0]):
            v = flat[k]
            if v > t:
                out[k] = v - t
            elif v < -t:
                out[k] = v + t
            else:
                out[k] = 0.0
        return out.reshape(x.shape)

    @njit(cache=True)
    def _bfs_nb(indptr, indices, sources):
        n = indptr.shape[0] - 1
        dist = np.full(n, UNREACHABLE, dtype=np.int64)
        queue = np.empty(n, dtype=np.int64)
        head = 0
        tail = 0
        for s in sources:
            if dist[s] != 0:
                dist[s] = 0
                queue[tail] = s
                tail += 1
        while head < tail:
            u = queue[head]
            head += 1
            for p in range(indptr[u], indptr[u + 1]):
                v = indices[p]
                if dist[v] == UNREACHABLE:
                    dist[v] = dist[u] + 1
                    queue[tail] = v
                    tail += 1
        return dist

    def spmm_numba(A, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _spmm_nb(A.indptr, A.indices, A.data, X)

    def grad_block_numba(A, Bb, col0, lam, y, r, rho, tb):
        return _grad_block_nb(
            A.indptr, A.indices, A.data, np.ascontiguousarray(Bb), int(col0),
            float(lam), y, r, float(rho), np.asarray(tb, dtype=np.float64),
        )

    def grad_step_numba(A, Bb, col0, lam, y, r, rho, tb, gamma):
        out, gmax = _grad_step_nb(
            A.indptr, A.indices, A.data, np.ascontiguousarray(Bb), int(col0),
            float(lam), y, r, float(rho), np.asarray(tb, dtype=np.float64), float(gamma),
        )
        return out, float(gmax)

    def objective_terms_numba(A, Bb, col0):
        return _objective_terms_nb(A.indptr, A.indices, A.data, np.ascontiguousarray(Bb), int(col0))

    def labeled_row_sums_numba(Bb, cols):
        return _labeled_row_sums_nb(Bb, np.asarray(cols, dtype=np.int64))

    def soft_threshold_numba(x, t):
        return _soft_threshold_nb(np.asarray(x, dtype=np.float64), float(t))

    def bfs_numba(indptr, indices, sources):
        return _bfs_nb(indptr, indices, np.asarray(sources, dtype=np.int64))


if USE_NUMBA:
    spmm = spmm_numba
    grad_block = grad_block_numba
    grad_step = grad_step_numba
    objective_terms = objective_terms_numba
    labeled_row_sums = labeled_row_sums_numba
    soft_threshold_array = soft_threshold_numba
    bfs = bfs_numba
else:
    spmm = spmm_numpy
    grad_block = grad_block_numpy
    grad_step = grad_step_numpy
    objective_terms = objective_terms_numpy
    labeled_row_sums = labeled_row_sums_numpy
    soft_threshold_array = soft_threshold_numpy
    bfs = bfs_numpy

apply_thread_cap()
