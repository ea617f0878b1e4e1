"""Kernel backend selection.

The hot recurrence kernels exist twice: one plain-numpy body and a
numba-compiled twin of the same body.  ``RELNET_BACKEND=numpy`` forces the
numpy path, ``RELNET_BACKEND=numba`` requires numba and fails loudly if it
is missing.  Unset, numba is used when importable.
"""

import os

_ENV_VAR = "RELNET_BACKEND"
_CHOICES = ("numba", "numpy")


def _requested() -> str | None:
    value = os.environ.get(_ENV_VAR, "").strip().lower()
    if not value:
        return None
    if value not in _CHOICES:
        raise ValueError(
            f"{_ENV_VAR} must be one of {_CHOICES}, got {value!r}"
        )
    return value


try:
    from numba import njit  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

_choice = _requested()
if _choice == "numba" and not NUMBA_AVAILABLE:
    raise ImportError(f"{_ENV_VAR}=numba but numba is not importable")

NUMBA_ENABLED = NUMBA_AVAILABLE if _choice is None else _choice == "numba"


def active_backend() -> str:
    """Name of the kernel implementation selected at import time."""
    return "numba" if NUMBA_ENABLED else "numpy"
