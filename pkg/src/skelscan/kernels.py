"""Backend selection for the selective-scan kernels.

The compiled extension is used when importable; otherwise the NumPy fallback.
Set ``SKELSCAN_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _scan_ref

try:
    if os.environ.get("SKELSCAN_BACKEND", "").lower() == "python":
        raise ImportError("fallback forced by SKELSCAN_BACKEND")
    from . import _scan_ext as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _scan_ref}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

_active = "compiled" if _compiled is not None else "python"


def available() -> list[str]:
    return sorted(BACKENDS)


def active() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ValueError(f"scan backend {name!r} unavailable; have {available()}")
    _active = name


def get(name: str | None = None):
    return BACKENDS[name or _active]
