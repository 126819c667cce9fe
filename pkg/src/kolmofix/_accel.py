"""Switch between numba-compiled kernels and the pure-numpy fallback.

Set ``KOLMOFIX_DISABLE_NUMBA=1`` before import to force the numpy path.
``use_numba`` flips the choice at runtime (used by the benchmark).
"""

import os

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


_ENABLED = HAVE_NUMBA and not _env_flag("KOLMOFIX_DISABLE_NUMBA")


def numba_enabled():
    return _ENABLED


def use_numba(flag):
    """Enable or disable the compiled kernels; returns the previous setting."""
    global _ENABLED
    previous = _ENABLED
    _ENABLED = bool(flag) and HAVE_NUMBA
    return previous


def set_threads(n):
    if HAVE_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
