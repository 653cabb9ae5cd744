"""Backend selection for the hot kernels.

``LPSL_BACKEND=numpy`` forces the pure numpy/scipy path; the default is
``numba`` when it imports. ``LPSL_THREADS`` caps numba/torch parallelism.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # skip the TBB probe; omp is thread-safe for the concurrent block updates
        numba.config.THREADING_LAYER = "omp"
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_requested = os.environ.get("LPSL_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"LPSL_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

USE_NUMBA = HAVE_NUMBA and _requested == "numba"
BACKEND = "numba" if USE_NUMBA else "numpy"


def thread_cap():
    """Thread cap from ``LPSL_THREADS``, or None when unset."""
    raw = os.environ.get("LPSL_THREADS")
    if not raw:
        return None
    value = int(raw)
    if value < 1:
        raise ValueError("LPSL_THREADS must be >= 1")
    return value


def apply_thread_cap():
    cap = thread_cap()
    if cap is None:
        return
    if HAVE_NUMBA:
        numba.set_num_threads(min(cap, numba.config.NUMBA_NUM_THREADS))
