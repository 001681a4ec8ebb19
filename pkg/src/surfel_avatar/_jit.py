"""Numba switch.

Set ``SURFEL_AVATAR_DISABLE_JIT=1`` to run every hot kernel through its
vectorised numpy twin instead of the compiled loop.
"""
import os

DISABLE_JIT = os.environ.get("SURFEL_AVATAR_DISABLE_JIT", "0").lower() in ("1", "true", "yes")

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not DISABLE_JIT


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or a no-op decorator when numba is off."""
    kwargs.setdefault("cache", True)
    if not HAS_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
