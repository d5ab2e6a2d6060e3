"""Selects between numba-compiled kernels and the pure-numpy fallback.

Set ``MFABA_DISABLE_NUMBA=1`` before import to force the numpy path. The
numpy path is also used automatically when numba is not importable.
"""
import os

_DISABLED = os.environ.get("MFABA_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError("numba disabled by MFABA_DISABLE_NUMBA")
    from numba import njit
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
