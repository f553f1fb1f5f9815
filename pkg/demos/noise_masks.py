"""
Action-aware noise masks
========================

MultiAdd shifts the noise at position t by the sum of the normalized
embeddings of actions 1..t; SingleAdd uses only action t's embedding. After
noising to n = N the per-position spread grows with t under MultiAdd, and the
means drift in the direction of the normalized embedding mean.
"""

import numpy as np

from actdiff import dataset as D
from actdiff.noise import build_mask, estimate_noise_stats, normalize_embeddings
from actdiff.schedule import build_cosine_schedule

table = normalize_embeddings(np.array([[0.5, -0.5], [0.2, 0.2]]) * 10)
print("normalized table:\n", table.rows)
for mode in ("MultiAdd", "SingleAdd", "NoMask"):
    print(mode, build_mask([0, 1], table, mode).values.tolist())

# %%
# Fitted statistics on the linear synthetic preset.
train, _ = D.split(D.build_dataset(D.preset("linear", seed=0), 3), 0.7, seed=0)
schedule = build_cosine_schedule(200)
print("normalized embedding mean:", round(float(train.mask_table().rows.mean()), 3))
for mode in ("NoMask", "SingleAdd", "MultiAdd"):
    st = estimate_noise_stats(train, schedule, mode, seed=0, draws=10)
    print(f"{mode:>9}: mu={np.round(st.mu, 3)}  sigma={np.round(st.sigma, 3)}")

# %%
# With seed 1 the normalized table mean is negative, so the MultiAdd drift
# reverses sign.
train1, _ = D.split(D.build_dataset(D.preset("linear", seed=1), 3), 0.7, seed=1)
st = estimate_noise_stats(train1, schedule, "MultiAdd", seed=0, draws=10)
print("seed 1 table mean:", round(float(train1.mask_table().rows.mean()), 3), "mu:", np.round(st.mu, 3))
