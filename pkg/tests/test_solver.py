import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from lpsl import solver
from lpsl.errors import DensityError, DivergenceError, ValidationError
from lpsl.graph import Graph, symmetric_normalize
from lpsl.solver import (
    SolverConfig,
    block_gradient,
    closed_form_unconstrained,
    constraint_residual,
    lagrangian_gradient,
    lagrangian_value,
    load_structure,
    soft_threshold,
    solve_dense,
    solve_sparse,
)

from conftest import dense_norm, pick_labels, random_graph

TWO = symmetric_normalize(Graph.from_edges(2, [0], [1]))


def _oracle_value(B, y, L, t, lam, rho, c):
    n = len(t)
    r = B @ t - c
    return np.sum((np.eye(n) - B) ** 2) + lam * np.trace(B.T @ L @ B) + y @ r + rho / 2 * r @ r


def _oracle_grad(B, y, L, t, lam, rho, c):
    n = len(t)
    r = B @ t - c
    return 2 * (B - np.eye(n)) + 2 * lam * L @ B + np.outer(y, t) + rho * np.outer(r, t)


def _instance(n, seed, k=None):
    rng = np.random.default_rng(seed)
    g = random_graph(n, 0.3, rng)
    mask = pick_labels(n, k or max(1, n // 4), rng)
    return rng, symmetric_normalize(g), mask


# --- lagrangian_value -------------------------------------------------------


def test_value_two_nodes_hand():
    cfg = SolverConfig(lam=1, rho=2, c=1)
    assert lagrangian_value(np.eye(2), np.zeros(2), TWO, [True, False], cfg) == pytest.approx(3.0, abs=1e-14)


def test_value_identity_unconstrained_zero():
    cfg = SolverConfig(lam=0, rho=0)
    assert lagrangian_value(np.eye(2), np.zeros(2), TWO, [True, False], cfg) == 0.0


def test_value_accepts_laplacian_matrix():
    cfg = SolverConfig(lam=1, rho=2, c=1)
    assert lagrangian_value(np.eye(2), np.zeros(2), TWO.norm_lap, [True, False], cfg) == pytest.approx(3.0)


def test_value_dense_oracle():
    rng, ops, mask = _instance(8, 0)
    B, y = rng.normal(size=(8, 8)), rng.normal(size=8)
    cfg = SolverConfig(lam=2.5, rho=0.7, c=1.3)
    want = _oracle_value(B, y, ops.norm_lap.toarray(), mask.astype(float), 2.5, 0.7, 1.3)
    assert lagrangian_value(B, y, ops, mask, cfg) == pytest.approx(want, abs=1e-10, rel=0)


def test_value_shape_mismatch():
    with pytest.raises(ValidationError):
        lagrangian_value(np.eye(3), np.zeros(3), TWO, [True, False], SolverConfig())


# --- gradients ---------------------------------------------------------------


def test_gradient_oracle_and_unlabeled_columns():
    rng, ops, mask = _instance(10, 1)
    B, y = rng.normal(size=(10, 10)), rng.normal(size=10)
    cfg = SolverConfig(lam=3, rho=0.5, c=1)
    L = ops.norm_lap.toarray()
    G = lagrangian_gradient(B, y, ops, mask, cfg)
    np.testing.assert_allclose(G, _oracle_grad(B, y, L, mask.astype(float), 3, 0.5, 1), atol=1e-12)
    free = ~mask
    smooth = 2 * (B - np.eye(10)) + 6 * L @ B
    np.testing.assert_allclose(G[:, free], smooth[:, free], atol=1e-12)


def test_gradient_zero_at_identity():
    cfg = SolverConfig(lam=0, rho=0)
    G = lagrangian_gradient(np.eye(5), np.zeros(5), symmetric_normalize(random_graph(5, 0.5, np.random.default_rng(0))), np.ones(5, bool), cfg)
    np.testing.assert_array_equal(G, 0.0)


def _fd_check(n, seed):
    rng, ops, mask = _instance(n, seed)
    B, y = rng.normal(size=(n, n)), rng.normal(size=n)
    cfg = SolverConfig(lam=float(rng.uniform(0.5, 10)), rho=float(rng.uniform(0.01, 2)), c=float(rng.uniform(0.5, 1.5)))
    G = lagrangian_gradient(B, y, ops, mask, cfg)
    h = 1e-5
    F = np.empty_like(B)
    for i in range(n):
        for j in range(n):
            E = np.zeros_like(B)
            E[i, j] = h
            F[i, j] = (lagrangian_value(B + E, y, ops, mask, cfg) - lagrangian_value(B - E, y, ops, mask, cfg)) / (2 * h)
    return np.linalg.norm(F - G) / np.linalg.norm(G)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_finite_differences(seed):
    assert _fd_check(6 + seed, seed) < 1e-5


def test_block_gradient_no_labeled_columns():
    rng, ops, mask = _instance(12, 2)
    mask[:] = False
    mask[0] = True
    B, y = rng.normal(size=(12, 12)), rng.normal(size=12)
    cfg = SolverConfig(lam=2, rho=1, block_size=4)
    Gb = block_gradient(B, y, ops, mask, cfg, 1)
    L = ops.norm_lap.toarray()
    want = (2 * (B - np.eye(12)) + 4 * L @ B)[:, 4:8]
    np.testing.assert_allclose(Gb, want, atol=1e-12)


@pytest.mark.parametrize("d", [1, 3, 5, 12])
def test_block_gradients_concatenate_exactly(d):
    rng, ops, mask = _instance(12, 3)
    B, y = rng.normal(size=(12, 12)), rng.normal(size=12)
    cfg = SolverConfig(lam=2, rho=1, block_size=d)
    blocks = [block_gradient(B, y, ops, mask, cfg, j) for j in range(-(-12 // d))]
    np.testing.assert_array_equal(np.hstack(blocks), lagrangian_gradient(B, y, ops, mask, cfg))


def test_block_index_out_of_range():
    with pytest.raises(ValidationError):
        block_gradient(np.eye(2), np.zeros(2), TWO, [True, False], SolverConfig(block_size=1), 2)


# --- small pieces ------------------------------------------------------------


def test_soft_threshold_cases():
    assert soft_threshold(0.5, 0.1) == pytest.approx(0.4)
    assert soft_threshold(-0.05, 0.1) == 0.0
    assert soft_threshold(-0.3, 0.1) == pytest.approx(-0.2)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(soft_threshold(x, 0.0), x)
    with pytest.raises(ValidationError):
        soft_threshold(1.0, -0.1)


def test_constraint_residual_cases():
    np.testing.assert_array_equal(constraint_residual(np.eye(3), np.ones(3, bool), 1), 0)
    np.testing.assert_array_equal(constraint_residual(np.eye(2), [True, False], 1), [0, -1])
    B = np.array([[0.5, 0.5], [0.25, 0.75]])
    np.testing.assert_array_equal(constraint_residual(B, [True, True], 1), [0, 0])
    np.testing.assert_array_equal(constraint_residual(sp.csr_matrix(B), [True, True], 1), [0, 0])


def test_closed_form_cases():
    np.testing.assert_array_equal(closed_form_unconstrained(TWO, 0).values, np.eye(2))
    np.testing.assert_allclose(closed_form_unconstrained(TWO, 1).values, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-15)
    g = random_graph(25, 0.2, np.random.default_rng(4))
    ops = symmetric_normalize(g)
    a = 1 / 11
    ppr = a * np.linalg.inv(np.eye(25) - (1 - a) * dense_norm(g))
    np.testing.assert_allclose(closed_form_unconstrained(ops, 10).values, ppr, atol=1e-9, rtol=0)


def test_config_validation():
    with pytest.raises(ValidationError):
        SolverConfig(gamma=0)
    with pytest.raises(ValidationError):
        SolverConfig(block_size=0)
    with pytest.raises(ValidationError):
        SolverConfig(beta=-1)
    assert SolverConfig(rho=0).constrained is False


# --- dense solver ------------------------------------------------------------


def test_dense_unconstrained_two_nodes():
    cfg = SolverConfig(lam=1, rho=0, gamma=0.1, max_outer=2000, grad_tol=1e-12)
    B = solve_dense(TWO, [True, False], cfg)
    np.testing.assert_allclose(B.values, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-10)
    assert B.meta["stop"] == "gradient"


def test_dense_feasible_at_tolerance():
    _, ops, mask = _instance(15, 5)
    cfg = SolverConfig(lam=3, rho=0.5, gamma=0.02, outer_tol=1e-6, max_outer=5000)
    B = solve_dense(ops, mask, cfg)
    assert B.meta["stop"] == "tolerance"
    assert np.abs(constraint_residual(B.values, mask, 1.0)).max() <= 1e-6
    assert B.meta["residual_inf"] <= 1e-6
    assert {"iterations", "objective", "config"} <= set(B.meta)


def constrained_optimum(ops, mask, lam, c):
    """Stationarity gives (I + lam L) B = I - mu t^T / 2, so B = P + w t^T with
    P = (I + lam L)^-1, and B t = c 1 fixes w = (c 1 - P t) / |L|."""
    P = closed_form_unconstrained(ops, lam).values
    t = mask.astype(float)
    return P + np.outer(c - P @ t, t) / t.sum()


@pytest.mark.parametrize("seed,lam,c", [(6, 4.0, 1.0), (17, 10.0, 0.5), (18, 1.0, 1.5)])
def test_dense_matches_constrained_optimum(seed, lam, c):
    _, ops, mask = _instance(15, seed)
    cfg = SolverConfig(lam=lam, c=c, rho=0.5, gamma=1.0 / (4 + 4 * lam + mask.sum()), outer_tol=1e-11, max_outer=50000)
    B = solve_dense(ops, mask, cfg).values
    np.testing.assert_allclose(B, constrained_optimum(ops, mask, lam, c), atol=1e-8)


def test_dense_descent_with_fixed_multiplier():
    rng, ops, mask = _instance(10, 7)
    cfg = SolverConfig(lam=5, rho=0.3, gamma=1e-3)
    A = ops.norm_adj
    B = np.eye(10) + 0.1 * rng.normal(size=(10, 10))
    y = rng.normal(size=10)
    t = mask.astype(float)
    prev = lagrangian_value(B, y, ops, mask, cfg)
    for _ in range(200):
        r = constraint_residual(B, mask, cfg.c)
        B, _ = solver.kernels.grad_step(A, B, 0, cfg.lam, y, r, cfg.rho, t, cfg.gamma)
        cur = lagrangian_value(B, y, ops, mask, cfg)
        assert cur <= prev + 1e-12
        prev = cur


def test_dense_cap():
    with pytest.raises(ValidationError, match="dense_cap"):
        solve_dense(TWO, [True, False], SolverConfig(dense_cap=1))


def test_dense_divergence_raises():
    _, ops, mask = _instance(10, 8)
    with pytest.raises(DivergenceError):
        solve_dense(ops, mask, SolverConfig(gamma=5.0, max_outer=200))


def test_dense_callback_sees_rounds():
    seen = []
    solve_dense(TWO, [True, False], SolverConfig(max_outer=3, outer_tol=0), callback=lambda k, B, y, r: seen.append(k))
    assert seen == [1, 2, 3]


@pytest.mark.parametrize("seed", range(3))
def test_unconstrained_recovers_closed_form(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 50))
    g = random_graph(n, 0.1, rng)
    ops = symmetric_normalize(g)
    lam = float(rng.uniform(1, 10))
    gamma = 1.0 / (2 + 4 * lam)
    B = solve_dense(ops, pick_labels(n, 3, rng), SolverConfig(lam=lam, rho=0, gamma=gamma, max_outer=20000, grad_tol=1e-7))
    np.testing.assert_allclose(B.values, closed_form_unconstrained(ops, lam).values, atol=1e-5, rtol=0)


# --- sparse solver -----------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_sparse_single_block_equals_dense(seed):
    _, ops, mask = _instance(20, seed)
    cfg = SolverConfig(lam=10, rho=0.01, gamma=0.01, beta=0, block_size=20, max_outer=40)
    D = solve_dense(ops, mask, cfg)
    S = solve_sparse(ops, mask, cfg)
    np.testing.assert_array_equal(S.to_dense(), D.values)
    np.testing.assert_array_equal(S.meta["y"], D.meta["y"])


def test_sparse_blocks_close_to_dense_when_converged():
    _, ops, mask = _instance(20, 9)
    cfg = SolverConfig(lam=3, rho=0.5, gamma=0.02, beta=0, outer_tol=1e-9, max_outer=20000)
    D = solve_dense(ops, mask, cfg).values
    S = solve_sparse(ops, mask, cfg.replace(block_size=6)).to_dense()
    np.testing.assert_allclose(S, D, atol=1e-6)


def test_sparse_large_beta_collapses():
    _, ops, mask = _instance(12, 10)
    S = solve_sparse(ops, mask, SolverConfig(beta=10.0, rho=0.01, block_size=4, max_outer=3))
    assert S.nnz == 0


def test_sparse_no_zeros_no_duplicates():
    _, ops, mask = _instance(20, 11)
    S = solve_sparse(ops, mask, SolverConfig(beta=1e-3, rho=0.1, block_size=7, max_outer=30))
    assert np.all(S.vals != 0)
    keys = S.cols * 20 + S.rows
    assert np.all(np.diff(keys) > 0)  # sorted by (col, row), hence unique
    assert S.meta["nnz"] == S.nnz


def test_sparse_nnz_decreases_with_beta():
    _, ops, mask = _instance(30, 12)
    nnz = [
        solve_sparse(ops, mask, SolverConfig(beta=b, rho=0.1, block_size=8, max_outer=20, outer_tol=0)).nnz
        for b in (0, 1e-4, 1e-3, 1e-2)
    ]
    assert nnz == sorted(nnz, reverse=True)


def test_sparse_jacobi_mode_runs_and_converges():
    _, ops, mask = _instance(20, 13)
    cfg = SolverConfig(lam=3, rho=0.5, gamma=0.02, beta=0, block_size=5, outer_tol=1e-6, max_outer=20000)
    gs = solve_sparse(ops, mask, cfg).to_dense()
    jac = solve_sparse(ops, mask, cfg.replace(deterministic=False))
    assert jac.meta["residual_inf"] <= 1e-6
    np.testing.assert_allclose(jac.to_dense(), gs, atol=1e-4)


def test_sparse_deterministic_bitwise():
    _, ops, mask = _instance(20, 14)
    cfg = SolverConfig(beta=1e-4, rho=0.1, block_size=6, max_outer=15)
    a, b = solve_sparse(ops, mask, cfg), solve_sparse(ops, mask, cfg)
    np.testing.assert_array_equal(a.vals, b.vals)
    np.testing.assert_array_equal(a.rows, b.rows)


def test_sparse_density_guard():
    _, ops, mask = _instance(20, 15)
    with pytest.raises(DensityError):
        solve_sparse(ops, mask, SolverConfig(beta=0, block_size=5, max_outer=50, max_density=0.1))


def test_sparse_beta_needs_rho():
    with pytest.raises(ValidationError):
        solve_sparse(TWO, [True, False], SolverConfig(beta=1e-3, rho=0))


# --- files -------------------------------------------------------------------


def test_structure_files_round_trip(tmp_path):
    _, ops, mask = _instance(12, 16)
    cfg = SolverConfig(beta=1e-3, rho=0.1, block_size=5, max_outer=5)
    S = solve_sparse(ops, mask, cfg)
    path = tmp_path / "B.coo"
    S.save(path)
    first = path.read_text().splitlines()[0]
    assert first == f"#lpsl n=12 nnz={S.nnz} lambda=10.0 c=1.0 beta=0.001"
    T = load_structure(path)
    np.testing.assert_array_equal(T.to_dense(), S.to_dense())
    assert T.meta["config"]["beta"] == 1e-3

    D = solve_dense(ops, mask, cfg.replace(beta=0))
    path = tmp_path / "B.dense"
    D.save(path)
    assert path.read_text().startswith("#lpsl n=12 lambda=10.0 c=1.0 beta=0.0\n")
    np.testing.assert_array_equal(load_structure(path).values, D.values)


def test_structure_file_bad_header(tmp_path):
    path = tmp_path / "x"
    path.write_text("1 2 3\n")
    with pytest.raises(ValidationError):
        load_structure(path)


@settings(max_examples=15, deadline=None)
@given(n=st.integers(3, 12), seed=st.integers(0, 2**31))
def test_fd_property(n, seed):
    assert _fd_check(n, seed) < 1e-5
