"""Numba switch.

Set ``SCDCF_DISABLE_NUMBA=1`` before import to run every kernel through its
pure-numpy path. The flag is read once; ``set_backend`` flips it at runtime
for benchmarks and cross-backend tests.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

_TRUTHY = {"1", "true", "yes", "on"}

USE_NUMBA = HAVE_NUMBA and os.environ.get("SCDCF_DISABLE_NUMBA", "").lower() not in _TRUTHY


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous name."""
    global USE_NUMBA
    previous = backend()
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        USE_NUMBA = True
    elif name == "numpy":
        USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


def backend():
    return "numba" if USE_NUMBA else "numpy"
