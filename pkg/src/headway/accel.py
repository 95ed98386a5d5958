"""Acceleration layer: numba-compiled kernels with a pure-numpy fallback.

The fallback is selected by setting the environment variable
``HEADWAY_NO_NUMBA`` to 1/true/yes/on before import (or automatically when
numba is not importable).  ``benchmarks/bench_kernels.py`` compares the two
paths on representative workloads.
"""

import os

from . import kernels

_FLAG = "HEADWAY_NO_NUMBA"


def _flag_disabled() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() in ("1", "true", "yes", "on")


def _resolve() -> bool:
    if _flag_disabled():
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


NUMBA_ENABLED = _resolve()

if NUMBA_ENABLED:
    from numba import njit

    _wrap = njit(cache=True)
else:
    def _wrap(fn):
        return fn

rk4_plant = _wrap(kernels.rk4_plant)
active_set_qp = _wrap(kernels.active_set_qp)
pet_scan = _wrap(kernels.pet_scan)
