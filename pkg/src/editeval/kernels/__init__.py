"""Numeric hot paths with a numba backend and a pure-numpy fallback.

The backend is chosen once at import time. Set ``EDITEVAL_JIT=0`` to force
the numpy path (useful for debugging or where numba is unavailable); numba
is used otherwise when it imports cleanly.

Both backends are importable side by side through :func:`load_backend`,
which is what the equivalence tests and ``benchmarks/bench_kernels.py`` use.
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

__all__ = [
    "BACKEND",
    "greedy_match",
    "interpolated_ap",
    "iou_matrix",
    "load_backend",
    "similar_pairs",
    "union_area",
]


def load_backend(name: str) -> ModuleType:
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    return importlib.import_module(f"{__name__}._{name}")


def _select() -> tuple[str, ModuleType]:
    flag = os.environ.get("EDITEVAL_JIT", "1").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return "numpy", load_backend("numpy")
    try:
        return "numba", load_backend("numba")
    except ImportError:
        return "numpy", load_backend("numpy")


BACKEND, _impl = _select()

iou_matrix = _impl.iou_matrix
greedy_match = _impl.greedy_match
interpolated_ap = _impl.interpolated_ap
union_area = _impl.union_area
similar_pairs = _impl.similar_pairs
