"""Optional numba acceleration.

Set ``SRTKIT_DISABLE_NUMBA=1`` to force the pure-numpy kernels. Both paths
produce bit-identical results; numba only changes speed.
"""
import os


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


def _want_numba():
    flag = os.environ.get("SRTKIT_DISABLE_NUMBA", "").strip().lower()
    if flag in ("1", "true", "yes", "on"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


HAVE_NUMBA = _want_numba()

if HAVE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit
