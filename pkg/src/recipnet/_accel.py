"""Numba switch.

Set ``RECIPNET_NUMBA=0`` before import to force the pure-numpy kernels.
Numba is also skipped silently when it is not installed.
"""
import os

_flag = os.environ.get("RECIPNET_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "no", "off")

try:
    from numba import njit as _njit
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    _njit = None
    USE_NUMBA = False

HAVE_NUMBA = _njit is not None


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise.

    Kernels are always compiled when numba is importable (so the benchmark can
    compare both paths); ``USE_NUMBA`` only decides which path is dispatched.
    """
    if _njit is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)
