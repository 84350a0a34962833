"""Numba acceleration switch.

Hot kernels in :mod:`riskplan.kernels` are compiled with ``@njit`` when
numba is importable and the ``RISKPLAN_NUMBA`` environment variable is not
set to ``0``/``false``.  Setting ``RISKPLAN_NUMBA=0`` selects the pure
numpy fallback implementations instead (same results, slower inner loops).
``benchmarks/bench_accel.py`` compares the two paths.
"""

import os

_flag = os.environ.get("RISKPLAN_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _flag not in ("0", "false", "off", "no")

NUMBA_ENABLED = False
if NUMBA_REQUESTED:
    try:
        from numba import njit as _njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
        NUMBA_ENABLED = False


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, identity decorator otherwise."""
    if NUMBA_ENABLED:
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(func):
        return func

    return wrap
