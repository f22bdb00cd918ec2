"""Numba switch.

Set ``DUET_DISABLE_NUMBA=1`` before import to run every kernel on its
pure-numpy path. ``DUET_THREADS`` caps numba's worker pool.
"""
import os

_DISABLED = os.environ.get("DUET_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only when numba is absent/disabled
    numba = None
    NUMBA_AVAILABLE = False

if NUMBA_AVAILABLE and os.environ.get("DUET_THREADS"):
    numba.set_num_threads(max(1, min(int(os.environ["DUET_THREADS"]), numba.config.NUMBA_NUM_THREADS)))


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise ``None`` so callers fall back."""
    defaults = dict(cache=True, nogil=True)
    defaults.update(kwargs)

    def wrap(fn):
        if not NUMBA_AVAILABLE:
            return None
        return numba.njit(**defaults)(fn)

    if args and callable(args[0]):
        return wrap(args[0])
    return wrap


def backend():
    return "numba" if NUMBA_AVAILABLE else "numpy"
