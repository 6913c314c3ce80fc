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
# # Moving outliers out of the 4-bit path
#
# A few activation channels are much larger than the rest. Smoothing divides
# them by `d` and multiplies the matching weight rows by `d`, which leaves the
# product unchanged. The weight then carries the outliers, and a small SVD
# branch kept in high precision absorbs the largest directions. Only the
# residual goes to 4 bits.

# %%
import numpy as np

from tsquant.lowrank import split_low_rank
from tsquant.smoothing import apply_smoothing, channel_absmax, compute_smoothing

rng = np.random.default_rng(1)
x = rng.standard_normal((64, 32))
x[:, [3, 17]] *= 40  # two outlier channels
w = rng.standard_normal((32, 24)) / np.sqrt(32)

# %%
d = compute_smoothing(channel_absmax(x), w, migration=0.5)
x_hat, w_hat = apply_smoothing(x, w, d)
print("activation channel range before:", np.ptp(np.abs(x).max(0)).round(2))
print("activation channel range after :", np.ptp(np.abs(x_hat).max(0)).round(2))
print("product preserved:", np.allclose(x @ w, x_hat @ w_hat))

# %% [markdown]
# ## Low-rank split
# `w_hat = l1 @ l2 + residual`. The residual's Frobenius norm equals the
# tail of the singular values, so each extra rank removes the next largest one.

# %%
s = np.linalg.svd(w_hat, compute_uv=False)
for r in (0, 1, 2, 4, 8):
    f, resid = split_low_rank(w_hat, r)
    print(f"rank {r}: residual norm {np.linalg.norm(resid):7.3f}   tail {np.sqrt(np.sum(s[r:] ** 2)):7.3f}")
