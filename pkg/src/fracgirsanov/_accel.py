"""Backend selection for the hot kernels.

Set ``FRACGIRSANOV_BACKEND=numpy`` to force the pure-numpy code paths even
when numba is importable.  Any other value (or no value) uses numba when it
is installed.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "FRACGIRSANOV_BACKEND"


def backend():
    """Return ``"numba"`` or ``"numpy"`` according to the environment."""
    want = os.environ.get(ENV_FLAG, "numba").strip().lower()
    if want == "numpy" or not HAVE_NUMBA:
        return "numpy"
    return "numba"


def njit(*args, **kwargs):
    """``numba.njit`` with caching and nogil on, or a no-op decorator without numba.

    Releasing the GIL lets the harness spread path chunks over threads.
    """
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda fn: fn
