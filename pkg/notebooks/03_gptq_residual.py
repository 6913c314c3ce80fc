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
# # GPTQ on the residual
#
# Round-to-nearest ignores how inputs correlate. GPTQ rounds one input channel
# at a time and pushes its rounding error onto the channels not yet rounded,
# weighted by the inverse input Hessian `H = X^T X`. The objective it reduces
# is the layer output error `||X (R - R_q)||^2`.

# %%
import numpy as np

from tsquant.gptq import HessianAccumulator, accumulate, gptq_quantize

rng = np.random.default_rng(2)

# %%
ratios = []
for noise in (0.05, 0.2, 1.0, 5.0):
    x = rng.standard_normal((256, 1)) + noise * rng.standard_normal((256, 64))
    r = rng.standard_normal((64, 16))
    acc = accumulate(HessianAccumulator.zeros(64), x)
    _, rep = gptq_quantize(r, acc, "mxfp4")
    ratios.append(rep.objective / rep.rtn_objective)
    print(f"noise {noise:4}: GPTQ / RTN objective = {ratios[-1]:.3f}")

# %% [markdown]
# Strongly correlated inputs (small noise) leave the most room for error
# feedback. With nearly independent channels the Hessian is close to diagonal
# and GPTQ falls back towards round-to-nearest.
