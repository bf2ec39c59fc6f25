"""Numba switch.

Set ``HSQ_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy twin.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}

# keep numba from probing an old system TBB before the portable layers
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

try:
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("HSQ_DISABLE_NUMBA", "").strip().lower() in _FALSY


def njit(*args, **kwargs):
    if HAVE_NUMBA:
        return nb.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda func: func


if HAVE_NUMBA:
    prange = nb.prange
else:  # pragma: no cover
    prange = range


def set_threads(n):
    """Cap numba worker threads; returns the value actually applied."""
    if not HAVE_NUMBA or n is None:
        return None
    n = max(1, min(int(n), nb.config.NUMBA_NUM_THREADS))
    nb.set_num_threads(n)
    return n
