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
# # Clip ratios per timestep bin
#
# For each expert, layer and timestep bin the search tries ratios
# `rho in {0.5, ..., 1.0}` and keeps the one with the lowest local output error.
# The clip threshold is `rho * m`, where `m` is the bin's activation absmax,
# and the static scale is `rho * m / q_max`. At inference the current
# timestep selects the bin and the stored scale is looked up.

# %%
from collections import Counter

from tsquant.runtime import QuantConfig, quantize_model
from tsquant.toy_dit import ToyDiTConfig, build_model, denoise_trajectory

cfg = ToyDiTConfig(d_model=32, n_blocks=2)
model = build_model(cfg)
_, records = denoise_trajectory(model)
qm = quantize_model(model, records, QuantConfig.for_variant("svd_gptq_tsclip"))

# %% [markdown]
# ## Which ratios win

# %%
hist = Counter(e.ratio for e in qm.policy.entries.values())
for ratio in qm.policy.candidates:
    print(f"rho={ratio:.1f} {'#' * hist[ratio]}")

# %% [markdown]
# ## One layer across the trajectory

# %%
path = "blocks.1.ffn.2"
for t in (1.0, 0.8, 0.6, 0.4, 0.2, 0.0):
    expert = cfg.expert_for(t)
    e = qm.policy.entry(path, expert, t)
    print(f"t={t:.1f} {expert.value:<10} bin {qm.policy.bin_of(expert, t)}  rho={e.ratio}  m={e.m:8.2f}  scale={e.scale:.4f}")
