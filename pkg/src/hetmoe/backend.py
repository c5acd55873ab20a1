"""Kernel backend selection.

The numeric inner loops that are not plain BLAS calls (per-row top-k,
capacity-limited dispatch, elementwise GELU, row scatter-add) exist in two
implementations: numba-jitted loops and pure numpy. The active one is chosen
once at import from the ``HETMOE_KERNELS`` environment variable:

* ``auto`` (default) - numba if importable, numpy otherwise
* ``numba``          - require numba, fail loudly if missing
* ``numpy``          - force the pure-numpy path

``set_backend`` switches at runtime (used by tests and the benchmark).
"""

from __future__ import annotations

import os

ENV_VAR = "HETMOE_KERNELS"
_CHOICES = ("auto", "numba", "numpy")

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only on stripped installs
    NUMBA_AVAILABLE = False


def _resolve(requested: str) -> str:
    if requested not in _CHOICES:
        raise ValueError(
            f"{ENV_VAR}={requested!r} is not valid; choose one of {_CHOICES}"
        )
    if requested == "auto":
        return "numba" if NUMBA_AVAILABLE else "numpy"
    if requested == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError(f"{ENV_VAR}=numba requested but numba is not importable")
    return requested


_active = _resolve(os.environ.get(ENV_VAR, "auto"))


def active_backend() -> str:
    """Name of the backend currently used by the kernel dispatchers."""
    return _active


def set_backend(name: str) -> str:
    """Force a backend (``numba``/``numpy``/``auto``); returns the resolved name."""
    global _active
    _active = _resolve(name)
    return _active
