# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#   kernelspec:
#     display_name: Python 3
#     name: python3
# ---

# %% [markdown]
# # Two 4-bit grids
#
# `tsquant` rounds weights and activations onto one of two 4-bit grids:
#
# * **INT4**: 15 evenly spaced levels `-7..7` times a step `s = alpha / 7`.
# * **MXFP4**: the E2M1 values `{0, .5, 1, 1.5, 2, 3, 4, 6}` with a sign, and
#   one power-of-two exponent shared by each block of 32 values.

# %%
import numpy as np

from tsquant import quantizers as qz

rng = np.random.default_rng(0)

# %% [markdown]
# ## INT4 with a clip threshold
# Values past `alpha` saturate; everything inside lands within half a step.

# %%
p = qz.compute_scale(2.0, "int4")
z = np.array([-5.0, -1.3, 0.0, 0.14, 0.5, 1.99, 3.0])
print("step:", p.scale)
print("in :", z)
print("out:", qz.quantize_dequantize(z, p))

# %% [markdown]
# ## MXFP4 blocks
# The shared exponent is the smallest one that fits the block maximum under 6.
# Relative precision is roughly constant, so small and large values both keep
# a couple of significant bits.

# %%
block = rng.standard_normal(32) * 3
b = qz.mxfp4_encode_block(block)
print("shared exponent:", int(b.scale_exp) - qz.E8M0_BIAS)
print("first codes    :", b.codes[:8])
print("max abs error  :", np.abs(qz.mxfp4_decode_block(b) - block).max())

# %% [markdown]
# ## Grouped weights
# Weights are stored `(c_in, c_out)` with one scale per group of input channels.
# Codes take half a byte each.

# %%
w = rng.standard_normal((128, 16))
for grid in ("int4", "mxfp4"):
    gw = qz.quantize_weight_grouped(w, grid)
    err = np.linalg.norm(gw.dequantize() - w) / np.linalg.norm(w)
    print(f"{grid:>5}: group {gw.group:>2}, codes {gw.codes.nbytes} B, scales {gw.scales.nbytes} B, rel err {err:.3f}")
