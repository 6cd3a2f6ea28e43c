"""Numba dispatch for the hot loops.

Set ``RNVIT_DISABLE_NUMBA=1`` to force the pure-numpy paths (also used
automatically when numba cannot be imported). Every kernel has both forms
and the test suite checks they agree.
"""
import os

_FLAG = os.environ.get("RNVIT_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(func=None, **kwargs):
    """``numba.njit(cache=True)`` when numba is present, identity otherwise."""
    kwargs.setdefault("cache", True)

    def wrap(f):
        if not HAS_NUMBA:
            return f
        return numba.njit(**kwargs)(f)

    if func is not None:
        return wrap(func)
    return wrap


def pick(jitted, fallback):
    """Return the kernel variant selected by the environment flag."""
    return jitted if USE_NUMBA else fallback
