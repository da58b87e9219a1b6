"""Differentiable ranking of candidate allocations.

The argsort of a score vector s of length n can be written as a
permutation matrix whose row j one-hot encodes the index of the j-th
largest score. That matrix has a closed form through row-wise argmax of

    c_j = (n + 1 - 2j) * s - A 1,      A[m, l] = |s_m - s_l|,

and relaxing the argmax to a temperature softmax yields a row-stochastic
matrix whose rows converge to the hard permutation as the temperature
goes to zero. Only the relaxed matrix is used in training; inference
always takes the hard argmax of the scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def rank_scaling(n: int) -> np.ndarray:
    """(n + 1 - 2j) for ranks j = 1..n."""
    return (n + 1 - 2 * np.arange(1, n + 1)).astype(np.float64)


def sort_logits(scores: Tensor) -> Tensor:
    """Row logits of the relaxed permutation (before temperature):
    out[b, j, i] = (n + 1 - 2(j+1)) * s[b, i] - sum_l |s[b, i] - s[b, l]|.

    scores: [B, n] -> [B, n, n].
    """
    b, n = scores.shape
    rowsums = ad.absdiff_rowsums(scores)  # [B, n]
    scal = ad.constant(rank_scaling(n).reshape(1, n, 1))
    return ad.sub(ad.mul(ad.reshape(scores, (b, 1, n)), scal), ad.reshape(rowsums, (b, 1, n)))


def soft_sort_rows(scores: Tensor, temperature: float) -> Tensor:
    """Row-stochastic relaxed permutation matrix [B, n, n]."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return ad.softmax(ad.scale(sort_logits(scores), 1.0 / temperature), axis=-1)


def log_soft_sort_rows(scores: Tensor, temperature: float) -> Tensor:
    """Row-wise log of the relaxed permutation matrix, computed stably."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return ad.log_softmax(ad.scale(sort_logits(scores), 1.0 / temperature), axis=-1)


def hard_sort_matrix(scores: np.ndarray) -> np.ndarray:
    """Exact descending-argsort permutation matrix; ties keep the earlier
    index first (lexicographic tie-breaking)."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    order = np.argsort(-scores, kind="stable")
    m = np.zeros((n, n))
    m[np.arange(n), order] = 1.0
    return m


def descending_order(scores: np.ndarray) -> np.ndarray:
    """Index of the j-th largest score, ties broken toward earlier indices."""
    return np.argsort(-np.asarray(scores), kind="stable")


@dataclass
class SoftPermutation:
    """Relaxed and hard views of one score vector's descending sort."""

    soft: np.ndarray          # [n, n], rows sum to 1
    hard: np.ndarray          # [n, n] permutation matrix
    temperature: float

    @property
    def order(self) -> np.ndarray:
        return self.hard.argmax(axis=1)


def soft_sort(scores: np.ndarray, temperature: float) -> SoftPermutation:
    """Single-vector convenience wrapper around the graph ops."""
    scores = np.asarray(scores, dtype=np.float64)
    soft = soft_sort_rows(ad.constant(scores.reshape(1, -1)), temperature).data[0]
    return SoftPermutation(soft=soft, hard=hard_sort_matrix(scores), temperature=temperature)
