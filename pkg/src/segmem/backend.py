"""Kernel backend selection: numba-jitted loops or plain numpy loops.

The hot per-token scan kernels in :mod:`segmem.kernels` are written as
explicit loops over numpy arrays.  By default they are compiled with
``numba.njit``; setting the environment variable ``SEGMEM_BACKEND=numpy``
(or running without numba installed) keeps them as ordinary Python
functions operating on numpy arrays.  Both variants stay importable so the
benchmark can compare them side by side.
"""

import os

try:
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def _njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


_env = os.environ.get("SEGMEM_BACKEND", "").strip().lower()
if _env not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"SEGMEM_BACKEND must be 'numba' or 'numpy', got {_env!r}"
    )
if _env == "numba" and not NUMBA_AVAILABLE:
    raise RuntimeError("SEGMEM_BACKEND=numba requested but numba is not importable")

_backend = "numpy" if (_env == "numpy" or not NUMBA_AVAILABLE) else "numba"


def current_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    """Switch the dispatch target of the public kernel wrappers."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = name


def jit(fn):
    """numba.njit when available; identity otherwise."""
    if NUMBA_AVAILABLE:
        return _njit(cache=True)(fn)
    return fn
