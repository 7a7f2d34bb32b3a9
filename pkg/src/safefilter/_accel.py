"""Optional numba acceleration for the hot numeric kernels.

Set ``SAFEFILTER_NUMBA=0`` in the environment to run every kernel as plain
numpy/Python.  The flag is read once at import time.
"""

import logging
import os

logger = logging.getLogger(__name__)

USE_NUMBA = os.environ.get("SAFEFILTER_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        logger.warning("numba not importable, falling back to pure numpy kernels")
        USE_NUMBA = False


def _null_decorator(pyfunc=None, **kwargs):
    def wrap(func):
        return func

    return wrap if pyfunc is None else wrap(pyfunc)


if USE_NUMBA:
    njit = numba.njit
else:
    njit = _null_decorator
