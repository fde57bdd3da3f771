"""Numba switch.

Hot kernels are compiled with ``numba.njit`` unless the environment variable
``DISTREACH_NUMBA`` is set to ``0`` (or numba is not importable), in which case
the pure-numpy implementations in :mod:`distreach.kernels` are used instead.
The flag is read once at import time.
"""

from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("DISTREACH_NUMBA", "1").strip() not in ("0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` with numba (cached, nogil) or return None when numba is unavailable."""
    if not HAVE_NUMBA:
        return None
    return numba.njit(cache=True, nogil=True)(fn)
