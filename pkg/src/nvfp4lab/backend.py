"""Kernel backend selection.

Hot inner loops ship in two implementations: numba-jitted kernels and
vectorized numpy fallbacks.  The active path is resolved once at import
time from the ``NVFP4LAB_BACKEND`` environment variable:

    NVFP4LAB_BACKEND=numba   require numba (ImportError if missing)
    NVFP4LAB_BACKEND=numpy   force the pure-numpy fallback
    unset / auto             numba when importable, numpy otherwise

Both paths produce identical results for every deterministic kernel (the
accumulation order is matched deliberately), so the flag only trades
speed.  ``benchmarks/bench_backends.py`` times one against the other.
"""

import os
import warnings

_requested = os.environ.get("NVFP4LAB_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"NVFP4LAB_BACKEND must be 'numba', 'numpy' or 'auto', got {_requested!r}"
    )

HAVE_NUMBA = False
if _requested != "numpy":
    try:
        import numba  # noqa: F401

        HAVE_NUMBA = True
        # stale system TBB triggers a threading-layer warning at first
        # parallel dispatch; numba falls back cleanly, so silence it
        warnings.filterwarnings(
            "ignore", message="The TBB threading layer requires TBB version",
            category=numba.NumbaWarning)
    except ImportError:
        if _requested == "numba":
            raise

USE_NUMBA = HAVE_NUMBA and _requested != "numpy"

if USE_NUMBA:
    from numba import njit, prange
else:
    # No-op stand-ins so jitted twins can still be defined (they are only
    # called when USE_NUMBA is set, or explicitly by the benchmark).
    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap

    prange = range


def active_backend() -> str:
    """Name of the kernel path selected at import time."""
    return "numba" if USE_NUMBA else "numpy"
