"""Numba switch.

Hot kernels are written twice: an ``@njit`` loop nest and a vectorised numpy
twin. ``USE_NUMBA`` picks which one the public kernel names are bound to.
Set ``FUSESTRATA_DISABLE_NUMBA=1`` to force the numpy path.
"""
import os

try:
    import numba
    from numba import prange
    HAVE_NUMBA = True
    # the bundled TBB is too old and warns on every first parallel launch
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "omp"
except ImportError:  # pragma: no cover
    numba = None
    prange = range
    HAVE_NUMBA = False


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _env_flag("FUSESTRATA_DISABLE_NUMBA")


def njit(parallel=False, fastmath=False):
    """``numba.njit`` with cache on, or ``None``-returning stub without numba.

    ``fastmath`` only grants reassociation, which lets long reductions
    vectorise; the compiled order is still fixed, so results stay
    bit-reproducible from run to run.
    """
    flags = {"reassoc", "contract"} if fastmath else False

    def deco(func):
        if not HAVE_NUMBA:
            return None
        return numba.njit(cache=True, nogil=True, parallel=parallel, fastmath=flags)(func)
    return deco


def set_threads(n):
    """Cap numba worker threads; no-op without numba."""
    if HAVE_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
