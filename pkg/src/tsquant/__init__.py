"""W4A4 post-training quantization with timestep-binned activation clipping.

Pipeline per linear layer: per-channel smoothing, a truncated-SVD branch kept
in high precision, GPTQ rounding of the 4-bit residual, and a per-(expert,
layer, timestep-bin) search over activation clipping ratios. A deterministic
two-expert toy DiT supplies calibration activations.
"""

__version__ = "0.1.0"
