"""
The cosine noise schedule
=========================

alpha_bar falls from 1 to (almost) 0 along a squared cosine. The last beta
is clipped at 0.999, so the stored alpha_bar[N] is tiny but not zero.
"""

import numpy as np

from actdiff.schedule import build_cosine_schedule

s = build_cosine_schedule(N=200, tau=0.008)

for n in (0, 1, 50, 100, 150, 199, 200):
    beta = "" if n == 0 else f"  beta={s.beta[n]:.5f}"
    print(f"n={n:3d}  alpha_bar={s.alpha_bar[n]:.6f}  raw={s.alpha_bar_raw[n]:.3e}{beta}")

# %%
# The stored values satisfy the one-step recurrence to rounding error.
n = np.arange(1, 201)
print("recurrence residual:", np.max(np.abs(s.alpha_bar[n - 1] * (1 - s.beta[n]) - s.alpha_bar[n])))
