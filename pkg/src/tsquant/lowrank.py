"""Low-rank / residual split of a smoothed weight."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankError
from .tensor_math import as_matrix, truncated_svd


@dataclass(frozen=True, eq=False)
class LowRankFactors:
    """``l1 @ l2`` with ``l1`` of shape (c_in, r) and ``l2`` of shape (r, c_out)."""

    l1: np.ndarray
    l2: np.ndarray

    @property
    def rank(self) -> int:
        return self.l1.shape[1]

    def product(self) -> np.ndarray:
        return self.l1.astype(np.float64) @ self.l2.astype(np.float64)

    def astype(self, dtype) -> "LowRankFactors":
        return LowRankFactors(self.l1.astype(dtype), self.l2.astype(dtype))

    def __eq__(self, other):
        if not isinstance(other, LowRankFactors):
            return NotImplemented
        return (
            self.l1.dtype == other.l1.dtype
            and np.array_equal(self.l1, other.l1)
            and np.array_equal(self.l2, other.l2)
        )


def split_low_rank(w_hat, r: int):
    """Split ``w_hat`` into its rank-``r`` truncated SVD and the residual.

    Singular values are folded into ``l1``. ``r == 0`` gives empty factors and
    the residual is ``w_hat`` itself.

    Returns:
        ``(factors, residual)`` with ``factors.product() + residual == w_hat``.
    """
    w_hat = as_matrix(w_hat, "w_hat")
    c_in, c_out = w_hat.shape
    if not 0 <= r <= min(c_in, c_out):
        raise RankError(f"rank {r} outside [0, {min(c_in, c_out)}] for shape {w_hat.shape}")
    if r == 0:
        return LowRankFactors(np.zeros((c_in, 0)), np.zeros((0, c_out))), w_hat.copy()
    u, s, v = truncated_svd(w_hat, r)
    factors = LowRankFactors(u * s, v.T.copy())
    return factors, w_hat - factors.product()
