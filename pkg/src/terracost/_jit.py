"""Optional numba acceleration.

Kernels are written once as plain Python loops and compiled with ``njit`` when
numba is importable and ``TERRACOST_DISABLE_JIT`` is unset (or ``0``).  Every
kernel module also ships a vectorised numpy path; :data:`USE_JIT` selects
between them at import time.
"""

import os

_disabled = os.environ.get("TERRACOST_DISABLE_JIT", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("disabled by TERRACOST_DISABLE_JIT")
    from numba import njit as _njit

    USE_JIT = True
except ImportError:
    USE_JIT = False
    _njit = None


def njit(*args, **kwargs):
    """``numba.njit`` (cached, no fastmath) or an identity decorator."""
    if _njit is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)


def backend() -> str:
    return "numba" if USE_JIT else "numpy"
