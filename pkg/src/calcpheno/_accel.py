"""Numba switch.

Set ``CALCPHENO_NO_NUMBA=1`` before import to route every kernel through its
pure-numpy fallback. The fallbacks are also importable directly from
:mod:`calcpheno.kernels._numpy` so both paths can be compared in one process.
"""
import os

_DISABLED = os.environ.get("CALCPHENO_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    import numba  # noqa: F401
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def backend():
    return "numba" if USE_NUMBA else "numpy"
