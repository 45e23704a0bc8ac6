"""Kernel backend selection.

Hot iteration loops exist in two interchangeable implementations: a
vectorized pure-numpy module and a numba ``@njit`` module with explicit
loops.  The active one is chosen by the ``DPOPT_BACKEND`` environment
variable (``"numpy"`` or ``"numba"``); unset, numba is used when it imports
cleanly and numpy otherwise.  Both backends produce results equal to within
accumulation-order rounding (~1e-12), and the test suite pins them against
each other whenever both are available.
"""

from __future__ import annotations

import os

from .errors import ConfigError

ENV_VAR = "DPOPT_BACKEND"
_CHOICES = ("numpy", "numba")


def numba_available():
    """True when the numba compiler imports in this environment."""
    try:
        import numba  # noqa: F401
    except Exception:
        return False
    return True


def active_backend(override=None):
    """Resolve the backend name from ``override``, the environment, or
    auto-detection, in that order."""
    choice = override if override is not None else os.environ.get(ENV_VAR)
    if choice is None or choice == "":
        return "numba" if numba_available() else "numpy"
    choice = str(choice).strip().lower()
    if choice not in _CHOICES:
        raise ConfigError(
            f"{ENV_VAR} must be one of {_CHOICES}, got {choice!r}")
    if choice == "numba" and not numba_available():
        raise ConfigError(
            "backend 'numba' requested but numba is not importable")
    return choice


def get_kernels(backend=None):
    """Import and return the kernel module for ``backend`` (resolved via
    :func:`active_backend` when omitted)."""
    name = active_backend(backend)
    if name == "numba":
        from . import _kernels_nb as mod
    else:
        from . import _kernels_np as mod
    return mod
