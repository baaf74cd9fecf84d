"""Optional numba acceleration.

Hot loops are written once as plain Python over numpy arrays and compiled
with numba when it is importable and not disabled. Set ``RFA_DISABLE_NUMBA=1``
to force the pure-numpy code paths (useful for debugging and for the backend
benchmark).
"""

import os

_DISABLED = os.environ.get("RFA_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - depends on environment
    numba = None
    NUMBA_AVAILABLE = False


def njit(fn):
    """Compile ``fn`` in nopython mode, or return ``None`` when numba is off."""
    if not NUMBA_AVAILABLE:
        return None
    return numba.njit(cache=True, nogil=True)(fn)


def backend_name():
    return "numba" if NUMBA_AVAILABLE else "numpy"
