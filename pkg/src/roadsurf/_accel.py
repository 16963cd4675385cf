"""Numba switch.

Hot kernels are written twice: a loop form compiled with ``numba.njit`` and a
vectorised numpy form. Setting ``ROADSURF_DISABLE_NUMBA=1`` (or running without
numba installed) selects the numpy path at import time.
"""

import os

_FLAG = os.environ.get("ROADSURF_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_ENABLED = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator.

    The undecorated Python function stays reachable as ``.py_func`` in both
    cases so tests can compare the compiled and interpreted loops.
    """
    if numba is not None:
        return numba.njit(*args, **kwargs)

    def wrap(fn):
        fn.py_func = fn
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return wrap(args[0])
    return wrap
