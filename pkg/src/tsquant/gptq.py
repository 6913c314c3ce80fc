"""GPTQ rounding for the residual weight branch.

Weights are stored ``(c_in, c_out)``, so GPTQ's "columns" are the rows of the
residual: one input channel at a time is rounded and its error pushed onto
the not-yet-rounded input channels through the inverse Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quantizers as qz
from .errors import CalibrationEmptyError, DefinitenessError, DomainError, ShapeError
from .tensor_math import as_matrix, cholesky, cholesky_inverse


@dataclass
class HessianAccumulator:
    """Running ``sum(x.T @ x)`` over calibration inputs."""

    h: np.ndarray
    n_samples: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "HessianAccumulator":
        return cls(np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return self.h.shape[0]


def accumulate(acc: HessianAccumulator, x_hat) -> HessianAccumulator:
    x_hat = as_matrix(x_hat, "x_hat")
    if x_hat.shape[1] != acc.dim:
        raise ShapeError(f"input has {x_hat.shape[1]} channels, accumulator expects {acc.dim}")
    return HessianAccumulator(acc.h + x_hat.T @ x_hat, acc.n_samples + x_hat.shape[0])


@dataclass
class GptqReport:
    objective: float
    rtn_objective: float
    order: list = field(default_factory=list)


def layer_objective(h: np.ndarray, delta: np.ndarray) -> float:
    """``sum ||X delta||_F^2`` expressed through ``h = X.T X``."""
    return float(max(np.einsum("ij,ik,kj->", delta, h, delta), 0.0))


def gptq_quantize(residual, acc: HessianAccumulator, grid=qz.QuantGrid.MXFP4,
                  group: int | None = None, damping: float = 0.01):
    """Quantize ``residual`` with GPTQ error feedback.

    Scales are frozen per group from the residual before the sweep; input
    channels are processed in ascending order.

    Returns:
        ``(packed, report)``: a :class:`GroupedWeight` holding codes and scales,
        and the GPTQ/RTN objectives on the accumulated inputs.
    """
    grid = qz.QuantGrid.parse(grid)
    group = qz.group_size_for(grid, group)
    w = as_matrix(residual, "residual")
    c_in, c_out = w.shape
    if acc.dim != c_in:
        raise ShapeError(f"Hessian dimension {acc.dim} does not match {c_in} input channels")
    if acc.n_samples == 0:
        raise CalibrationEmptyError("GPTQ needs at least one calibration sample")
    if not damping > 0:
        raise DomainError(f"damping must be positive, got {damping}")

    h = acc.h
    lam = damping * float(np.mean(np.diag(h)))
    if not lam > 0:
        lam = damping
    damped = h + lam * np.eye(c_in)
    try:
        hinv = cholesky_inverse(damped)
        # Upper factor U of H^-1: row j of U is the inverse Hessian restricted
        # to channels >= j, scaled by 1/sqrt of its pivot.
        upper = cholesky(hinv).T
    except DefinitenessError as exc:
        raise DefinitenessError(
            f"damped Hessian is not positive definite at pivot {exc.pivot}; "
            "increase the damping fraction", pivot=exc.pivot) from exc

    scales = qz.weight_scales(w, grid, group)
    steps = qz.scales_to_steps(scales, grid)
    step_rows = np.repeat(steps, group, axis=1)[:, :c_in].T

    work = w.copy()
    levels = np.empty_like(w)
    for j in range(c_in):
        lv = qz.grid_round(work[j] / step_rows[j], grid)
        levels[j] = lv
        err = (work[j] - lv * step_rows[j]) / upper[j, j]
        if j + 1 < c_in:
            work[j + 1 :] -= np.outer(upper[j, j + 1 :], err)

    packed = qz.pack_levels(levels, scales, grid, group)
    rtn_levels = qz.round_to_nearest(w, scales, grid, group)
    report = GptqReport(
        objective=layer_objective(h, w - levels * step_rows),
        rtn_objective=layer_objective(h, w - rtn_levels * step_rows),
        order=list(range(c_in)),
    )
    return packed, report


def rtn_quantize(residual, grid=qz.QuantGrid.MXFP4, group: int | None = None):
    """Round-to-nearest counterpart of :func:`gptq_quantize` (no report)."""
    return qz.quantize_weight_grouped(residual, grid, group)
