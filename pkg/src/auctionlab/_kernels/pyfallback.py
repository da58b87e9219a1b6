"""Pure-numpy versions of the hot kernels.

Semantically identical to the compiled versions in ``_core.pyx``; used when
the extension is not built or when ``AUCTIONLAB_PURE_PYTHON=1``.
"""

from __future__ import annotations

import numpy as np


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """out[idx[i], :] += rows[i, :], accumulating over duplicate indices."""
    np.add.at(out, idx, rows)


def absdiff_rowsums(x: np.ndarray) -> np.ndarray:
    """Row sums of the absolute pairwise-difference matrix.

    x: [B, n] -> out[b, i] = sum_j |x[b, i] - x[b, j]|
    """
    return np.abs(x[:, :, None] - x[:, None, :]).sum(axis=2)


def absdiff_rowsums_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient of ``absdiff_rowsums`` w.r.t. x given upstream grad g."""
    s = np.sign(x[:, :, None] - x[:, None, :])
    return g * s.sum(axis=2) + np.einsum("bkn,bn->bk", s, g)
