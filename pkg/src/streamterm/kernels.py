"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the
pure-Python implementation is used. Set ``STREAMTERM_PURE=1`` to force the
fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("STREAMTERM_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None
    else:
        BACKEND = "cython"
else:
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py

edit_distance = _impl.edit_distance
align_cuts = _impl.align_cuts


def backends() -> dict:
    """All importable kernel implementations, keyed by name."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        out["cython"] = _kernels
    return out
