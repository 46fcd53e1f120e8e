"""Backend selection for the hot kernels.

The compiled extension is used when it imports; set ``SPECOFFLOAD_PURE=1`` to
force the numpy fallback. Both backends produce bitwise-identical results.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_compiled = None
if not os.environ.get("SPECOFFLOAD_PURE"):
    try:
        from . import _kernels as _compiled  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def get_backend(name: str | None = None):
    """Return the kernel module for ``name`` ("compiled", "python") or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _impl.linear(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64))


def masked_scores(q, k, mask, n_heads: int, scale: float) -> np.ndarray:
    return _impl.masked_scores(
        np.ascontiguousarray(q, dtype=np.float64),
        np.ascontiguousarray(k, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.uint8),
        int(n_heads),
        float(scale),
    )


def weighted_values(e, v, mask) -> np.ndarray:
    return _impl.weighted_values(
        np.ascontiguousarray(e, dtype=np.float64),
        np.ascontiguousarray(v, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.uint8),
    )


def quantize_groups(groups: np.ndarray, bits: int):
    return _impl.quantize_groups(np.ascontiguousarray(groups, dtype=np.float64), int(bits))


def dequantize_groups(codes, scales, zeros) -> np.ndarray:
    return _impl.dequantize_groups(
        np.ascontiguousarray(codes, dtype=np.uint8),
        np.ascontiguousarray(scales, dtype=np.float64),
        np.ascontiguousarray(zeros, dtype=np.float64),
    )
