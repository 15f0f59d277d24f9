"""Kernel dispatch: the compiled extension when it imports, numpy otherwise.

Set ``RXNFLOW_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _native_py

BACKEND = "python"
_impl = _native_py

if os.environ.get("RXNFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _native as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

fnv1a64 = _impl.fnv1a64
fingerprint_bits = _impl.fingerprint_bits
integrate_mlp = _impl.integrate_mlp


def backend_module(name: str):
    """Return the kernel module by name ("python" or "cython")."""
    if name == "python":
        return _native_py
    if name == "cython":
        from . import _native  # type: ignore[attr-defined]
        return _native
    raise ValueError(f"unknown kernel backend {name!r}")
