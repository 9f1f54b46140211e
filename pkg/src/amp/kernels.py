"""Hot aggregation kernels with a compiled core and a numpy fallback.

The compiled extension (``amp._kernels``) is used when it imports cleanly.
Set ``AMP_KERNELS=numpy`` to force the pure-Python path.
"""
from __future__ import annotations

import os

import numpy as np


def _np_scatter_add(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((n, values.shape[1]), dtype=np.float64)
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(index, weights=values[:, j], minlength=n)
    return out


def _np_scatter_add_1d(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(index, weights=values, minlength=n).astype(np.float64, copy=False)


def _np_gather_rows(values: np.ndarray, index: np.ndarray) -> np.ndarray:
    return values[index]


def _np_propagate(values, src, dst, weights, n):
    return _np_scatter_add(values[src] * weights[:, None], dst, n)


def _np_propagate_unweighted(values, src, dst, n):
    return _np_scatter_add(values[src], dst, n)


NUMPY_KERNELS = {
    "scatter_add": _np_scatter_add,
    "scatter_add_1d": _np_scatter_add_1d,
    "gather_rows": _np_gather_rows,
    "propagate": _np_propagate,
    "propagate_unweighted": _np_propagate_unweighted,
}


def _load_compiled():
    try:
        from amp import _kernels
    except ImportError:
        return None
    return {
        "scatter_add": _kernels.scatter_add,
        "scatter_add_1d": _kernels.scatter_add_1d,
        "gather_rows": _kernels.gather_rows,
        "propagate": _kernels.propagate,
        "propagate_unweighted": _kernels.propagate_unweighted,
    }


COMPILED_KERNELS = _load_compiled()

if COMPILED_KERNELS is not None and os.environ.get("AMP_KERNELS", "").lower() != "numpy":
    BACKEND = "cython"
    _active = COMPILED_KERNELS
else:
    BACKEND = "numpy"
    _active = NUMPY_KERNELS


def _prep(values: np.ndarray, index: np.ndarray):
    return (
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(index, dtype=np.int64),
    )


def scatter_add(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Row ``v`` of the result is the sum of ``values[e]`` over ``index[e] == v``."""
    values, index = _prep(values, index)
    if values.ndim == 1:
        return _active["scatter_add_1d"](values, index, n)
    return _active["scatter_add"](values, index, n)


def gather_rows(values: np.ndarray, index: np.ndarray) -> np.ndarray:
    values, index = _prep(values, index)
    if values.ndim == 1:
        return values[index]
    return _active["gather_rows"](values, index)


def propagate(values: np.ndarray, src: np.ndarray, dst: np.ndarray, n: int,
              weights: np.ndarray | None = None) -> np.ndarray:
    """Fused gather/scale/scatter: ``out[dst[e]] += weights[e] * values[src[e]]``."""
    values, src = _prep(values, src)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    if weights is None:
        return _active["propagate_unweighted"](values, src, dst, n)
    return _active["propagate"](values, src, dst, np.ascontiguousarray(weights, dtype=np.float64), n)
