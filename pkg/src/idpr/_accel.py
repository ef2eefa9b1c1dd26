"""Backend switch for the hot kernels.

Kernels come in two flavours: a numba ``@njit`` loop and a pure-numpy
implementation with the same asymptotic cost.  The numba path is used when
numba imports cleanly and ``IDPR_DISABLE_NUMBA`` is not set to a truthy value.
"""
import contextlib
import os

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

_TRUTHY = ("1", "true", "yes", "on")

_backend = "numba" if HAS_NUMBA and os.environ.get(
    "IDPR_DISABLE_NUMBA", "").strip().lower() not in _TRUTHY else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = name


@contextlib.contextmanager
def use_backend(name):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)
