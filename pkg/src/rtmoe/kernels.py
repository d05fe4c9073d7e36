"""Backend selection for the routing hot loop.

The compiled extension is used when it was built; set ``RTMOE_PURE_PYTHON=1``
to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _routing_py

try:
    if os.environ.get("RTMOE_PURE_PYTHON", "") == "1":
        raise ImportError("pure-python backend requested")
    from . import _routing_ext
except ImportError:
    _routing_ext = None

BACKENDS = {"python": _routing_py}
if _routing_ext is not None:
    BACKENDS["cython"] = _routing_ext

DEFAULT_BACKEND = "cython" if _routing_ext is not None else "python"


def get(name: str | None = None):
    name = name or DEFAULT_BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"routing backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
