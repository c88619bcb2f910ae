"""Optional numba acceleration.

Set ``TASKWEIGHT_NUMBA=0`` to force the pure-numpy kernels. When numba is
missing the numpy path is used regardless of the flag.
"""

import os
import warnings

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("TASKWEIGHT_NUMBA", "1").strip() not in ("0", "false", "no", "")

if not HAVE_NUMBA and os.environ.get("TASKWEIGHT_NUMBA", "1") not in ("0",):
    warnings.warn("numba not found; falling back to numpy kernels", RuntimeWarning)


def njit(func):
    """Compile ``func`` with numba when available, else return it unchanged."""
    if not HAVE_NUMBA:
        return func
    return _numba.njit(cache=True, nogil=True)(func)
