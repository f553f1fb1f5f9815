"""
The denoiser network
====================

A U-shaped stack of residual blocks that never resamples the horizon axis,
with optional self-attention after each stage. Without attention, a change
at one position only reaches outputs inside the convolution receptive field.
"""

import numpy as np

from actdiff.model import Denoiser, DenoiserConfig, attention_parameter_count, predict_x0

for attention in (True, False):
    cfg = DenoiserConfig(input_width=57, horizon=3, attention_enabled=attention)
    model = Denoiser(cfg, seed=0)
    print(f"attention={attention}: {model.num_parameters():,} parameters "
          f"({attention_parameter_count(model):,} in attention)")

# %%
# Receptive-field probe on a long horizon. The output convolution starts at
# zero, so give it random weights first.
T = 30
for attention in (False, True):
    model = Denoiser(DenoiserConfig(input_width=6, horizon=T, channels=[8, 8], time_embed_dim=8,
                                    attention_enabled=attention), seed=0)
    rng = np.random.default_rng(0)
    for p in model.out_conv.parameters():
        p.assign(rng.standard_normal(p.shape) * 0.3)
    x = rng.standard_normal((1, T, 6))
    bumped = x.copy()
    bumped[0, 0] += 1.0
    reach = np.abs(predict_x0(model, bumped, 10) - predict_x0(model, x, 10))[0].max(axis=1) > 0
    print(f"attention={attention}: perturbing position 0 changes {reach.sum()} of {T} output positions")
