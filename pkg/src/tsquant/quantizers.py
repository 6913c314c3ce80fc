"""Symmetric INT4 grid, the MXFP4 (E2M1 + E8M0) block codec, and grouped weights.

Packed weight layout: codes are laid out as ``(C_out, C_in_padded)`` so every
group is contiguous along input channels, then packed two per byte with the
low nibble first. INT4 codes are 4-bit two's complement in ``[-7, 7]``; MXFP4
codes are ``sign << 3 | magnitude_index``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

MX_BLOCK = 32
E8M0_BIAS = 127
FP4_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
_FP4_MIDPOINTS = (FP4_MAGNITUDES[1:] + FP4_MAGNITUDES[:-1]) / 2
FP4_MAX = 6.0


class QuantGrid(str, enum.Enum):
    INT4 = "int4"
    MXFP4 = "mxfp4"

    @property
    def q_max(self) -> int:
        """Largest representable level; the clip threshold is ``scale * q_max``."""
        return 7 if self is QuantGrid.INT4 else 6

    @classmethod
    def parse(cls, value) -> "QuantGrid":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DomainError(f"unknown grid {value!r}; expected 'int4' or 'mxfp4'") from None


@dataclass(frozen=True)
class UniformQuantParams:
    scale: float
    zero_point: int = 0
    q_min: int = -7
    q_max: int = 7

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise DomainError(f"scale must be positive and finite, got {self.scale}")
        if self.q_min >= self.q_max:
            raise DomainError(f"q_min {self.q_min} must be below q_max {self.q_max}")

    @property
    def alpha(self) -> float:
        """Clipping threshold implied by the scale."""
        return self.scale * self.q_max

    @property
    def symmetric(self) -> bool:
        return self.zero_point == 0 and self.q_min == -self.q_max


def compute_scale(alpha: float, grid=QuantGrid.INT4) -> UniformQuantParams:
    """Symmetric params whose clip threshold is ``alpha``."""
    grid = QuantGrid.parse(grid)
    if not alpha > 0:
        raise DomainError(f"clipping threshold must be positive, got {alpha}")
    q = grid.q_max
    return UniformQuantParams(scale=alpha / q, zero_point=0, q_min=-q, q_max=q)


def quantize_dequantize(z, p: UniformQuantParams) -> np.ndarray:
    """Fake-quantize ``z`` on the uniform grid of ``p`` (round half to even)."""
    z = np.asarray(z, dtype=np.float64)
    q = np.clip(np.rint(z / p.scale) + p.zero_point, p.q_min, p.q_max)
    return p.scale * (q - p.zero_point)


# ---------------------------------------------------------------- E2M1 codec


def fp4_round(x) -> np.ndarray:
    """Nearest E2M1 value (ties away from zero), saturating at +-6."""
    x = np.asarray(x, dtype=np.float64)
    idx = np.searchsorted(_FP4_MIDPOINTS, np.abs(x), side="right")
    return np.copysign(FP4_MAGNITUDES[idx], x) * (idx > 0)


def _fp4_codes(levels: np.ndarray) -> np.ndarray:
    mag = np.abs(levels)
    idx = np.searchsorted(FP4_MAGNITUDES, mag)
    sign = ((levels < 0) & (idx > 0)).astype(np.uint8)
    return (sign << 3) | idx.astype(np.uint8)


def _fp4_levels(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    mag = FP4_MAGNITUDES[codes & 0x7]
    return np.where(codes & 0x8, -mag, mag)


def _shared_exponent(amax: np.ndarray) -> np.ndarray:
    """Unbiased power-of-two exponent e with ``3 < amax / 2**e <= 6``.

    Zero blocks get 0; results are clamped to the E8M0 range [-127, 127].
    """
    amax = np.asarray(amax, dtype=np.float64)
    _, e2 = np.frexp(amax)
    floor_log2 = e2 - 1
    e = floor_log2 - 2
    too_big = amax > np.ldexp(FP4_MAX, e)
    e = np.where(too_big, e + 1, e)
    e = np.where(amax > 0, e, 0)
    return np.clip(e, -E8M0_BIAS, E8M0_BIAS).astype(np.int64)


def mxfp4_encode(values) -> tuple[np.ndarray, np.ndarray]:
    """Encode along the last axis in blocks of 32.

    Args:
        values: array whose last dimension is a multiple of 32.

    Returns:
        ``(scale_exp, codes)``: biased E8M0 bytes of shape ``(..., n/32)`` and
        unpacked 4-bit codes of shape ``(..., n)``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] % MX_BLOCK:
        raise ShapeError(f"last dimension {values.shape[-1]} is not a multiple of {MX_BLOCK}")
    blocks = values.reshape(values.shape[:-1] + (-1, MX_BLOCK))
    e = _shared_exponent(np.abs(blocks).max(axis=-1))
    levels = fp4_round(np.ldexp(blocks, -e[..., None]))
    codes = _fp4_codes(levels).reshape(values.shape)
    return (e + E8M0_BIAS).astype(np.uint8), codes


def mxfp4_decode(scale_exp, codes) -> np.ndarray:
    scale_exp = np.asarray(scale_exp, dtype=np.int64)
    codes = np.asarray(codes, dtype=np.uint8)
    levels = _fp4_levels(codes).reshape(codes.shape[:-1] + (-1, MX_BLOCK))
    out = np.ldexp(levels, (scale_exp - E8M0_BIAS)[..., None])
    return out.reshape(codes.shape)


def mxfp4_fake_quant(x) -> np.ndarray:
    """Encode then decode along the last axis, zero-padding to whole blocks."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    pad = (-n) % MX_BLOCK
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,))], axis=-1)
    return mxfp4_decode(*mxfp4_encode(x))[..., :n]


@dataclass(frozen=True)
class MXFP4Block:
    scale_exp: int
    codes: np.ndarray

    def __post_init__(self):
        if not 0 <= self.scale_exp <= 254:
            raise DomainError(f"scale_exp {self.scale_exp} outside [0, 254]")
        if len(self.codes) != MX_BLOCK:
            raise ShapeError(f"block must hold {MX_BLOCK} codes, got {len(self.codes)}")

    def __eq__(self, other):
        if not isinstance(other, MXFP4Block):
            return NotImplemented
        return self.scale_exp == other.scale_exp and np.array_equal(self.codes, other.codes)

    __hash__ = None


def mxfp4_encode_block(values) -> MXFP4Block:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (MX_BLOCK,):
        raise ShapeError(f"expected {MX_BLOCK} values, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise DomainError("block contains NaN or Inf")
    exp, codes = mxfp4_encode(values)
    return MXFP4Block(int(exp[0]), codes)


def mxfp4_decode_block(block: MXFP4Block) -> np.ndarray:
    return mxfp4_decode(np.array([block.scale_exp]), block.codes)


# --------------------------------------------------------- shared grid helpers


def grid_round(x, grid) -> np.ndarray:
    """Round already-scaled values to the nearest level of ``grid``."""
    grid = QuantGrid.parse(grid)
    if grid is QuantGrid.INT4:
        return np.clip(np.rint(x), -7, 7)
    return fp4_round(x)


def levels_to_codes(levels, grid) -> np.ndarray:
    grid = QuantGrid.parse(grid)
    levels = np.asarray(levels)
    if grid is QuantGrid.INT4:
        return (levels.astype(np.int64) & 0xF).astype(np.uint8)
    return _fp4_codes(levels)


def codes_to_levels(codes, grid) -> np.ndarray:
    grid = QuantGrid.parse(grid)
    codes = np.asarray(codes, dtype=np.uint8)
    if grid is QuantGrid.INT4:
        return ((codes.astype(np.int64) ^ 8) - 8).astype(np.float64)
    return _fp4_levels(codes)


def grid_levels(grid) -> np.ndarray:
    """Every representable level of ``grid`` in ascending order (15 values)."""
    grid = QuantGrid.parse(grid)
    if grid is QuantGrid.INT4:
        return np.arange(-7.0, 8.0)
    return np.concatenate([-FP4_MAGNITUDES[:0:-1], FP4_MAGNITUDES])


def pack_nibbles(codes) -> np.ndarray:
    """Pack 4-bit codes two per byte, low nibble first."""
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    return (codes[0::2] & 0xF) | ((codes[1::2] & 0xF) << 4)


def unpack_nibbles(packed, count: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0xF
    out[1::2] = packed >> 4
    return out[:count]


def quantize_activation(x, params: UniformQuantParams, grid) -> np.ndarray:
    """Clip to the threshold carried by ``params`` then fake-quantize on ``grid``.

    INT4 uses the static scale directly. MXFP4 keeps its per-block shared
    exponents; the static threshold only pre-clips.
    """
    grid = QuantGrid.parse(grid)
    x = np.asarray(x, dtype=np.float64)
    if grid is QuantGrid.INT4:
        return quantize_dequantize(x, params)
    alpha = params.alpha
    return mxfp4_fake_quant(np.clip(x, -alpha, alpha))


# ------------------------------------------------------------ grouped weights


@dataclass(frozen=True, eq=False)
class GroupedWeight:
    """A packed 4-bit weight of logical shape ``(c_in, c_out)``.

    Codes run along input channels, one output column after another, two per
    byte, so ``codes`` holds ``ceil(c_in * c_out / 2)`` bytes. The last group
    of a column may be short when ``c_in`` is not a multiple of ``group``.
    ``scales`` has shape ``(c_out, n_groups)``: float32 step sizes for INT4,
    biased E8M0 exponents (uint8) for MXFP4.
    """

    grid: QuantGrid
    group: int
    c_in: int
    c_out: int
    codes: np.ndarray
    scales: np.ndarray

    @property
    def padded_in(self) -> int:
        return self.c_in + (-self.c_in) % self.group

    @property
    def padding(self) -> int:
        return self.padded_in - self.c_in

    @property
    def n_groups(self) -> int:
        return self.padded_in // self.group

    def steps(self) -> np.ndarray:
        """Per-group multipliers as float64, shape ``(c_out, n_groups)``."""
        if self.grid is QuantGrid.INT4:
            return self.scales.astype(np.float64)
        return np.ldexp(1.0, self.scales.astype(np.int64) - E8M0_BIAS)

    def levels(self) -> np.ndarray:
        """Integer/E2M1 levels laid out as ``(c_out, c_in)``."""
        codes = unpack_nibbles(self.codes, self.c_out * self.c_in)
        return codes_to_levels(codes, self.grid).reshape(self.c_out, self.c_in)

    def dequantize(self) -> np.ndarray:
        step = np.repeat(self.steps(), self.group, axis=1)[:, : self.c_in]
        return (self.levels() * step).T.copy()

    @property
    def nbytes(self) -> int:
        return int(self.codes.nbytes + self.scales.nbytes)

    def __eq__(self, other):
        if not isinstance(other, GroupedWeight):
            return NotImplemented
        return (
            (self.grid, self.group, self.c_in, self.c_out)
            == (other.grid, other.group, other.c_in, other.c_out)
            and np.array_equal(self.codes, other.codes)
            and self.scales.dtype == other.scales.dtype
            and np.array_equal(self.scales, other.scales)
        )


def group_size_for(grid, group: int | None) -> int:
    grid = QuantGrid.parse(grid)
    if grid is QuantGrid.MXFP4:
        if group not in (None, MX_BLOCK):
            raise DomainError(f"MXFP4 blocks are fixed at {MX_BLOCK}, got group={group}")
        return MX_BLOCK
    group = 64 if group is None else int(group)
    if group < 1:
        raise DomainError(f"group size must be positive, got {group}")
    return group


def _padded_columns(w: np.ndarray, group: int) -> np.ndarray:
    """``w.T`` zero-padded along input channels to a multiple of ``group``."""
    pad = (-w.shape[0]) % group
    wt = w.T
    if pad:
        wt = np.hstack([wt, np.zeros((wt.shape[0], pad))])
    return wt


def weight_scales(w, grid, group: int | None = None) -> np.ndarray:
    """Stored per-group scales of ``w`` (INT4: float32 steps, MXFP4: E8M0 bytes)."""
    grid = QuantGrid.parse(grid)
    group = group_size_for(grid, group)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ShapeError(f"weight must be a non-empty 2-D matrix, got shape {w.shape}")
    blocks = _padded_columns(w, group).reshape(w.shape[1], -1, group)
    amax = np.abs(blocks).max(axis=-1)
    if grid is QuantGrid.INT4:
        step = np.where(amax > 0, amax / 7.0, 1.0).astype(np.float32)
        return np.where(step > 0, step, np.float32(1.0)).astype(np.float32)
    return (_shared_exponent(amax) + E8M0_BIAS).astype(np.uint8)


def scales_to_steps(scales: np.ndarray, grid) -> np.ndarray:
    grid = QuantGrid.parse(grid)
    if grid is QuantGrid.INT4:
        return scales.astype(np.float64)
    return np.ldexp(1.0, scales.astype(np.int64) - E8M0_BIAS)


def pack_levels(levels_in_out: np.ndarray, scales: np.ndarray, grid, group: int) -> GroupedWeight:
    """Build a GroupedWeight from grid levels laid out ``(c_in, c_out)``."""
    grid = QuantGrid.parse(grid)
    c_in, c_out = levels_in_out.shape
    codes = pack_nibbles(levels_to_codes(np.ascontiguousarray(levels_in_out.T), grid))
    return GroupedWeight(grid, group, c_in, c_out, codes, np.ascontiguousarray(scales))


def round_to_nearest(w, scales: np.ndarray, grid, group: int) -> np.ndarray:
    """Grid levels of ``w`` under frozen ``scales``, laid out ``(c_in, c_out)``."""
    steps = scales_to_steps(scales, grid)
    step_in_out = np.repeat(steps, group, axis=1)[:, : w.shape[0]].T
    return grid_round(np.asarray(w, dtype=np.float64) / step_in_out, grid)


def quantize_weight_grouped(w, grid=QuantGrid.MXFP4, group: int | None = None) -> GroupedWeight:
    """Round-to-nearest 4-bit quantization with per-group scales along input channels.

    Args:
        w: weight of shape ``(c_in, c_out)``.
        grid: ``int4`` (scale = group absmax / 7) or ``mxfp4`` (E8M0 per 32).
        group: INT4 group size (default 64); MXFP4 always uses 32.
    """
    grid = QuantGrid.parse(grid)
    group = group_size_for(grid, group)
    w = np.asarray(w, dtype=np.float64)
    scales = weight_scales(w, grid, group)
    levels = round_to_nearest(w, scales, grid, group)
    return pack_levels(levels, scales, grid, group)
