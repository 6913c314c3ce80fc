"""Dense linear algebra used throughout calibration.

Matrices are plain 2-D ``numpy`` float arrays. Calibration math runs in
float64; callers may hand in float32 and get float64 back.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, DefinitenessError, RankError, ShapeError

SVD_MAX_SWEEPS = 100
SVD_ROTATION_TOL = 1e-12
SYMMETRY_TOL = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite float64 2-D array or raise."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError(f"{name} contains NaN or Inf")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


_SCHEDULES: dict = {}


def _round_robin(n: int):
    """(left, right) index arrays for n - 1 rounds covering every pair once.

    ``n`` must be even. Pairs inside one round are disjoint, so the rotations
    of a round commute and can be applied together.
    """
    if n not in _SCHEDULES:
        players = list(range(n))
        rounds = []
        for _ in range(n - 1):
            rounds.append((np.array(players[: n // 2]), np.array(players[n // 2 :][::-1])))
            players = [players[0], players[-1]] + players[1:-1]
        _SCHEDULES[n] = rounds
    return _SCHEDULES[n]


def _jacobi_svd(a: np.ndarray):
    """One-sided Jacobi (Hestenes) SVD of a tall matrix (rows >= cols).

    Returns the rotated working matrix (orthogonal columns) and V.
    """
    m, n = a.shape
    work = a.copy()
    v = np.eye(n)
    if n % 2:
        work = np.hstack([work, np.zeros((m, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    n_pad = work.shape[1]
    tiny = np.finfo(np.float64).tiny
    off = np.inf
    for _ in range(SVD_MAX_SWEEPS):
        off = 0.0
        for left, right in _round_robin(n_pad):
            ap, aq = work[:, left], work[:, right]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            measure = np.abs(gamma) / np.maximum(np.sqrt(alpha * beta), tiny)
            off = max(off, measure.max())
            idx = np.flatnonzero(measure > SVD_ROTATION_TOL)
            if idx.size == 0:
                continue
            zeta = (beta[idx] - alpha[idx]) / (2.0 * gamma[idx])
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            li, ri = left[idx], right[idx]
            ap, aq = ap[:, idx], aq[:, idx]
            vp, vq = v[:, li], v[:, ri]
            work[:, li] = c * ap - s * aq
            work[:, ri] = s * ap + c * aq
            v[:, li] = c * vp - s * vq
            v[:, ri] = s * vp + c * vq
        if off <= SVD_ROTATION_TOL:
            break
    else:
        raise ConvergenceError(f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps", off)
    return work[:, :n], v[:n, :n]


def _complete_orthonormal(u: np.ndarray, known: int) -> np.ndarray:
    """Replace columns ``known:`` of ``u`` by an orthonormal completion."""
    m, r = u.shape
    basis = u[:, :known]
    out = [basis[:, i] for i in range(known)]
    for e in np.eye(m):
        if len(out) == r:
            break
        vec = e.copy()
        for _ in range(2):
            for b in out:
                vec -= (b @ vec) * b
        norm = np.linalg.norm(vec)
        if norm > 1e-8:
            out.append(vec / norm)
    return np.stack(out, axis=1)


def truncated_svd(m, r: int):
    """Top-``r`` singular triplets of ``m``.

    Args:
        m: matrix of shape (rows, cols).
        r: number of triplets, ``1 <= r <= min(rows, cols)``.

    Returns:
        ``(u, s, v)`` with ``u`` of shape (rows, r), ``s`` descending and
        ``v`` of shape (cols, r), so that ``m ~= u @ diag(s) @ v.T``.
    """
    m = as_matrix(m)
    rows, cols = m.shape
    if not 1 <= r <= min(rows, cols):
        raise RankError(f"rank {r} outside [1, {min(rows, cols)}] for shape {m.shape}")
    transposed = rows < cols
    a = m.T if transposed else m
    q = None
    if a.shape[0] > a.shape[1]:
        # Rotations then act on the small triangular factor only.
        q, a = np.linalg.qr(a)
    work, v = _jacobi_svd(a)
    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")[:r]
    s = sigma[order]
    v = v[:, order]
    u = np.zeros((a.shape[0], r))
    scale = s[0] if s.size else 0.0
    nonzero = s > max(scale, 1.0) * 1e-300
    u[:, nonzero] = work[:, order[nonzero]] / s[nonzero]
    n_ok = int(nonzero.sum())
    if n_ok < r:
        u = _complete_orthonormal(u, n_ok)
        s[n_ok:] = 0.0
    if q is not None:
        u = q @ u
    if transposed:
        u, v = v, u
    return u, s, v


def cholesky(h) -> np.ndarray:
    """Lower Cholesky factor; raises DefinitenessError naming the bad pivot."""
    h = as_matrix(h, "h")
    n = h.shape[0]
    if h.shape != (n, n):
        raise ShapeError(f"cholesky needs a square matrix, got {h.shape}")
    if np.abs(h - h.T).max(initial=0.0) > SYMMETRY_TOL * max(1.0, np.abs(h).max(initial=0.0)):
        raise DefinitenessError("matrix is not symmetric", pivot=None)
    low = np.zeros_like(h)
    for j in range(n):
        row = low[j, :j]
        d = h[j, j] - row @ row
        if not d > 0.0:
            raise DefinitenessError(f"matrix is not positive definite (pivot {j})", pivot=j)
        low[j, j] = np.sqrt(d)
        if j + 1 < n:
            low[j + 1 :, j] = (h[j + 1 :, j] - low[j + 1 :, :j] @ row) / low[j, j]
    return low


def _lower_inverse(low: np.ndarray) -> np.ndarray:
    n = low.shape[0]
    inv = np.zeros_like(low)
    for i in range(n):
        inv[i, :i] = -(low[i, :i] @ inv[:i, :i]) / low[i, i]
        inv[i, i] = 1.0 / low[i, i]
    return inv


def cholesky_inverse(h) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via its Cholesky factor."""
    linv = _lower_inverse(cholesky(h))
    out = linv.T @ linv
    return 0.5 * (out + out.T)


def cosine_error(y, y_hat) -> float:
    """``1 - cos(vec(y), vec(y_hat))``; 1.0 when ``y_hat`` is all zero."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    ny = np.linalg.norm(y)
    if ny == 0.0:
        raise ShapeError("reference output is all zero")
    nh = np.linalg.norm(y_hat)
    if nh == 0.0:
        return 1.0
    cos = float(np.vdot(y, y_hat) / (ny * nh))
    return float(np.clip(1.0 - cos, 0.0, 2.0))
