"""Kernel backend selection.

Hot numeric loops (NDT scoring, ray casting, BEV accumulation) exist in two
forms: a numba ``@njit`` version and a vectorised pure-numpy fallback. The
active backend is chosen once at import from the ``HYBRIDLOC_BACKEND``
environment variable ("numba" or "numpy"); unset means numba when
importable, numpy otherwise. ``set_backend`` allows switching at runtime
(used by tests and the benchmark script).
"""

import os

ENV_VAR = "HYBRIDLOC_BACKEND"
_VALID = ("numba", "numpy")


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def _detect() -> str:
    choice = os.environ.get(ENV_VAR, "").strip().lower()
    if choice and choice not in _VALID:
        raise ValueError(f"{ENV_VAR} must be one of {_VALID}, got {choice!r}")
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not _numba_available():
            raise ImportError(f"{ENV_VAR}=numba but numba is not importable")
        return "numba"
    return "numba" if _numba_available() else "numpy"


_BACKEND = _detect()


def active_backend() -> str:
    return _BACKEND


def use_numba() -> bool:
    return _BACKEND == "numba"


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not _numba_available():
        raise ImportError("numba backend requested but numba is not importable")
    _BACKEND = name
