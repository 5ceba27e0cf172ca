"""numba switch.

Set ``DILO_DISABLE_NUMBA=1`` to run the pure-numpy kernels instead of the
compiled ones (useful for debugging and for the benchmark comparison).
"""

from __future__ import annotations

import os

_disabled = os.environ.get("DILO_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and not _disabled


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it untouched."""
    if numba is None:
        return fn
    return numba.njit(cache=True)(fn)


def pick(jitted, fallback):
    return jitted if USE_NUMBA else fallback
