"""Kernel backend selection.

Hot inner loops (two-pass embedding, pruning, message aggregation) exist in
two variants: a numba ``@njit`` version and a pure-numpy fallback.  The active
variant is chosen once at import time from the ``PHYLOTOPO_BACKEND``
environment variable:

    PHYLOTOPO_BACKEND=numba   force numba (ImportError if unavailable)
    PHYLOTOPO_BACKEND=numpy   force the pure-numpy fallbacks
    unset / "auto"            numba if importable, else numpy

``benchmarks/benchmark_kernels.py`` compares the two side by side.
"""

import os

BACKEND_ENV = "PHYLOTOPO_BACKEND"


def _resolve() -> str:
    choice = os.environ.get(BACKEND_ENV, "auto").strip().lower()
    if choice in ("", "auto"):
        try:
            import numba  # noqa: F401
        except ImportError:
            return "numpy"
        return "numba"
    if choice in ("numba", "numpy"):
        if choice == "numba":
            import numba  # noqa: F401  -- fail loudly if forced but missing
        return choice
    raise ValueError(
        f"{BACKEND_ENV} must be 'numba', 'numpy' or 'auto', got {choice!r}"
    )


ACTIVE_BACKEND = _resolve()
USE_NUMBA = ACTIVE_BACKEND == "numba"

if USE_NUMBA:
    from numba import njit as _njit

    def njit(fn):
        return _njit(cache=True)(fn)
else:

    def njit(fn):
        return fn
