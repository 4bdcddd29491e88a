"""Optional numba acceleration.

Set ``DIRACTRAJ_DISABLE_NUMBA=1`` to force the pure-numpy code paths.
"""
import os

_DISABLED = os.environ.get("DIRACTRAJ_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError("numba disabled by environment")
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAVE_NUMBA:
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def use_numba():
    return HAVE_NUMBA
