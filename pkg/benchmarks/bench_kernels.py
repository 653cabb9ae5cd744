"""Time the numba kernels against their numpy/scipy fallbacks.

    python benchmarks/bench_kernels.py            # Cora if present, else a random graph
    python benchmarks/bench_kernels.py --n 5000 --width 256 --repeat 5
    python benchmarks/bench_kernels.py --solver   # also a few dense solver rounds per backend

Kernel timings call both implementations in one process. The ``--solver``
timings run a subprocess per backend so that ``LPSL_BACKEND`` picks the path.
"""
import argparse
import json
import os
import subprocess
import sys
import textwrap
import timeit
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from lpsl import kernels
from lpsl.graph import Graph, label_mask, load_dataset, make_split, symmetric_normalize

CORA = Path(__file__).resolve().parents[1] / "data" / "cora"


def load_graph(n, seed):
    if n is None and (CORA / "cora.edges").exists():
        ds = load_dataset(CORA / "cora.edges", CORA / "cora.features.csv.gz", CORA / "cora.labels")
        split = make_split(ds.classes, per_class=20, seed=seed)
        return "cora", ds.graph, label_mask(ds.graph.n, split.train)
    n = n or 2708
    rng = np.random.default_rng(seed)
    m = 2 * n  # average degree about 4, like Cora
    u, v = rng.integers(0, n, m), rng.integers(0, n, m)
    keep = u != v
    u, v = u[keep], v[keep]
    path = rng.permutation(n)
    u = np.concatenate([u, path[:-1]])
    v = np.concatenate([v, path[1:]])
    pairs = np.unique(np.stack([np.minimum(u, v), np.maximum(u, v)], 1), axis=0)
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, 140, replace=False)] = True
    return f"random-{n}", Graph.from_edges(n, pairs[:, 0], pairs[:, 1]), mask


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(A, mask, width, seed):
    n = A.shape[0]
    rng = np.random.default_rng(seed)
    Bb = np.ascontiguousarray(np.eye(n)[:, :width] + 0.01 * rng.random((n, width)))
    y, r = rng.normal(size=n), rng.normal(size=n)
    tb = mask[:width].astype(np.float64)
    src = np.flatnonzero(mask)
    args = (A, Bb, 0, 10.0, y, r, 0.1, tb, 0.02)
    return {
        "spmm": (lambda: kernels.spmm_numpy(A, Bb), lambda: kernels.spmm_numba(A, Bb)),
        "grad_step": (lambda: kernels.grad_step_numpy(*args), lambda: kernels.grad_step_numba(*args)),
        "objective_terms": (lambda: kernels.objective_terms_numpy(A, Bb, 0),
                            lambda: kernels.objective_terms_numba(A, Bb, 0)),
        "soft_threshold": (lambda: kernels.soft_threshold_numpy(Bb, 1e-3),
                           lambda: kernels.soft_threshold_numba(Bb, 1e-3)),
        "bfs": (lambda: kernels.bfs_numpy(A.indptr, A.indices, src),
                lambda: kernels.bfs_numba(A.indptr, A.indices, src)),
    }


SOLVER_SNIPPET = textwrap.dedent("""
    import json, sys, time
    import numpy as np
    from lpsl.graph import Graph, symmetric_normalize
    from lpsl.solver import SolverConfig, solve_dense
    d = np.load(sys.argv[1])
    g = Graph.from_edges(int(d["n"]), d["u"], d["v"])
    ops = symmetric_normalize(g)
    cfg = SolverConfig(lam=10, rho=0.1, gamma=0.02, beta=0, max_outer=int(sys.argv[2]), outer_tol=0)
    solve_dense(ops, d["mask"], cfg.replace(max_outer=1))  # warm-up
    t = time.perf_counter()
    solve_dense(ops, d["mask"], cfg)
    print(json.dumps({"seconds": time.perf_counter() - t}))
""")


def solver_rounds(graph, mask, rounds, tmp):
    u, v, _ = graph.edge_list()
    path = Path(tmp) / "bench_graph.npz"
    np.savez(path, n=graph.n, u=u, v=v, mask=mask)
    out = {}
    for backend in ("numba", "numpy"):
        env = os.environ | {"LPSL_BACKEND": backend}
        res = subprocess.run([sys.executable, "-c", SOLVER_SNIPPET, str(path), str(rounds)],
                             env=env, capture_output=True, text=True, check=True)
        out[backend] = json.loads(res.stdout.strip().splitlines()[-1])["seconds"]
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, help="random graph size (default: Cora when available)")
    ap.add_argument("--width", type=int, default=None, help="block width (default: full n)")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--solver", action="store_true", help="also time dense solver rounds per backend")
    ap.add_argument("--rounds", type=int, default=3)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)

    if not kernels.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")
    name, graph, mask = load_graph(args.n, args.seed)
    A = sp.csr_matrix(symmetric_normalize(graph).norm_adj)
    width = args.width or graph.n
    print(f"graph {name}: n={graph.n} edges={graph.n_edges} block width={width}")
    print(f"{'kernel':<16} {'numpy s':>10} {'numba s':>10} {'speedup':>8}")
    results = {"graph": name, "n": graph.n, "width": width, "kernels": {}}
    for kname, (f_np, f_nb) in kernel_cases(A, mask, width, args.seed).items():
        t_np, t_nb = best_of(f_np, args.repeat), best_of(f_nb, args.repeat)
        results["kernels"][kname] = {"numpy": t_np, "numba": t_nb}
        print(f"{kname:<16} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>7.1f}x")

    if args.solver:
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            t = solver_rounds(graph, mask, args.rounds, tmp)
        results["solver"] = t | {"rounds": args.rounds}
        print(f"{'solve_dense':<16} {t['numpy']:>10.3f} {t['numba']:>10.3f} {t['numpy'] / t['numba']:>7.1f}x"
              f"   ({args.rounds} rounds)")
    if args.json:
        Path(args.json).write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
