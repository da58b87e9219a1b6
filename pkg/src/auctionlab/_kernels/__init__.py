"""Hot-kernel dispatch: compiled Cython core when available, numpy fallback
otherwise. ``AUCTIONLAB_PURE_PYTHON=1`` forces the fallback.

``benchmarks/bench_kernels.py`` compares the two backends.
"""

from __future__ import annotations

import os

import numpy as np

from . import pyfallback

if os.environ.get("AUCTIONLAB_PURE_PYTHON", "") == "1":
    _core = None
else:
    try:
        from . import _core
    except ImportError:
        _core = None

BACKEND = "compiled" if _core is not None else "python"


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """out[idx[i], :] += rows[i, :], accumulating over duplicate indices."""
    if _core is not None and out.flags.c_contiguous:
        idx = np.ascontiguousarray(idx, dtype=np.int_)
        rows = np.ascontiguousarray(rows, dtype=np.float64)
        _core.scatter_add_rows(out, idx, rows)
    else:
        pyfallback.scatter_add_rows(out, idx, rows)


def absdiff_rowsums(x: np.ndarray) -> np.ndarray:
    """out[b, i] = sum_j |x[b, i] - x[b, j]| for x of shape [B, n]."""
    if _core is not None:
        return _core.absdiff_rowsums(np.ascontiguousarray(x, dtype=np.float64))
    return pyfallback.absdiff_rowsums(x)


def absdiff_rowsums_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient of ``absdiff_rowsums`` w.r.t. x, given upstream grad g."""
    if _core is not None:
        return _core.absdiff_rowsums_grad(
            np.ascontiguousarray(x, dtype=np.float64),
            np.ascontiguousarray(g, dtype=np.float64),
        )
    return pyfallback.absdiff_rowsums_grad(x, g)
