"""Per-channel smoothing: ``X W == (X diag(d)^-1) (diag(d) W)``."""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError
from .tensor_math import as_matrix

SMOOTH_FLOOR = 1e-5
_EPS = 1e-5


def compute_smoothing(act_absmax, w, migration: float = 0.5) -> np.ndarray:
    """Smoothing factors ``d`` (one per input channel).

    ``d_i = max(a_i, eps)**migration / max(wmax_i, eps)**(1 - migration)``,
    where ``a`` is the per-channel activation absmax and ``wmax`` the per-row
    weight absmax, floored at 1e-5.
    """
    w = as_matrix(w, "w")
    act_absmax = np.asarray(act_absmax, dtype=np.float64)
    if act_absmax.shape != (w.shape[0],):
        raise ShapeError(f"act_absmax has shape {act_absmax.shape}, expected ({w.shape[0]},)")
    if np.any(act_absmax < 0) or not np.all(np.isfinite(act_absmax)):
        raise DomainError("act_absmax entries must be finite and non-negative")
    if not 0.0 <= migration <= 1.0:
        raise DomainError(f"migration must lie in [0, 1], got {migration}")
    w_absmax = np.abs(w).max(axis=1)
    d = np.maximum(act_absmax, _EPS) ** migration / np.maximum(w_absmax, _EPS) ** (1.0 - migration)
    return np.maximum(d, SMOOTH_FLOOR)


def channel_absmax(xs) -> np.ndarray:
    """Per-column absmax over one matrix or an iterable of matrices."""
    if isinstance(xs, np.ndarray):
        xs = [xs]
    out = None
    for x in xs:
        m = np.abs(np.asarray(x, dtype=np.float64)).max(axis=0)
        out = m if out is None else np.maximum(out, m)
    if out is None:
        raise ShapeError("no activations given")
    return out


def _check_d(d, n: int) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (n,):
        raise ShapeError(f"smoothing vector has shape {d.shape}, expected ({n},)")
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise DomainError("smoothing factors must be positive and finite")
    return d


def smooth_activation(x, d) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / _check_d(d, x.shape[-1])


def smooth_weight(w, d) -> np.ndarray:
    w = as_matrix(w, "w")
    return w * _check_d(d, w.shape[0])[:, None]


def apply_smoothing(x, w, d):
    """Return ``(x / d, d[:, None] * w)``."""
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"x has {x.shape[1]} channels but w has {w.shape[0]} rows")
    return smooth_activation(x, d), smooth_weight(w, d)
