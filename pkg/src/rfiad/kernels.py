"""Hot kernels, backed by the compiled extension when it is importable.

Set ``RFIAD_PURE_PYTHON=1`` to force the numpy fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("RFIAD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

# Above this many multiply-adds numpy's BLAS matmul beats the compiled loop
# (see benchmarks/bench_kernels.py), so large lookups go to the fallback.
MAX_COSINE_COMPILED_LIMIT = 1 << 17


def _rows(x, d=None) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, d or 0)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {arr.shape}")
    return arr


def kcenter_greedy(points, history, n_select: int) -> tuple[np.ndarray, np.ndarray]:
    pts = _rows(points)
    hist = _rows(history, pts.shape[1]) if history is not None else np.zeros((0, pts.shape[1]))
    if hist.size == 0:
        hist = np.zeros((0, pts.shape[1]))
    if hist.shape[1] != pts.shape[1]:
        raise ValueError("points and history disagree on feature dimension")
    if not 0 < n_select <= pts.shape[0]:
        raise ValueError(f"cannot select {n_select} rows from {pts.shape[0]}")
    return _impl.kcenter_greedy(pts, hist, int(n_select))


def max_cosine(queries, bank) -> tuple[np.ndarray, np.ndarray]:
    q, b = _rows(queries), _rows(bank)
    if b.shape[0] == 0:
        raise ValueError("empty bank")
    if q.shape[1] != b.shape[1]:
        raise ValueError("queries and bank disagree on feature dimension")
    if not (np.any(q, axis=1).all() and np.any(b, axis=1).all()):
        raise ValueError("zero-norm row passed to max_cosine")
    if q.shape[0] * b.shape[0] * q.shape[1] > MAX_COSINE_COMPILED_LIMIT:
        return _fallback.max_cosine(q, b)
    return _impl.max_cosine(q, b)
