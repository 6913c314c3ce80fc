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
# # Ablation, memory and files
#
# The four ablation variants add one ingredient each: plain RTN, then
# smoothing with the low-rank branch, then GPTQ, then per-bin clipping.
# The error is the mean per-layer local MSE on the calibration inputs.

# %%
import tempfile
from pathlib import Path

from tsquant.analysis import ablation_row
from tsquant.runtime import QuantConfig, deserialize, estimate_memory, payload_path, quantize_model, serialize
from tsquant.toy_dit import ToyDiTConfig, build_model, denoise_trajectory

cfg = ToyDiTConfig(d_model=32, n_blocks=2)
model = build_model(cfg)
_, records = denoise_trajectory(model)

models = {}
for v in ("rtn", "svd_rtn", "svd_gptq", "svd_gptq_tsclip"):
    models[v] = quantize_model(model, records, QuantConfig.for_variant(v))
    row = ablation_row(models[v], model, records)
    print(f"{v:<16} mse {row.mean_layer_mse:9.4f}   cos err {row.mean_cosine_error:.2e}   {row.model_bytes} B")

# %% [markdown]
# ## Memory breakdown
# Byte counts come from the stored arrays themselves, so they match the payload file.
# At this reduced width (d_model=32) the float32 low-rank branch and smoothing
# vector weigh relatively more than at the default width of 64, where the same
# pipeline lands near 0.39 of the 16-bit size.

# %%
qm = models["svd_gptq_tsclip"]
mem = estimate_memory(qm)
for k, v in mem.items():
    print(f"{k:<15}{v:>9}")
print(f"ratio to 16-bit: {mem['total'] / mem['baseline_16bit']:.3f}")

# %% [markdown]
# ## Save and reload
# A JSON manifest plus a binary payload with a checksum.

# %%
with tempfile.TemporaryDirectory() as tmp:
    path = serialize(qm, Path(tmp) / "model.json")
    print("payload bytes:", payload_path(path).stat().st_size)
    print("roundtrip equal:", deserialize(path) == qm)
