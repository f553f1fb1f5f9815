"""
Recording a tape and checking gradients
=======================================

The engine records operations only while a ``Tape`` is active. Here we fit
a tiny softmax regression by hand and compare the tape's gradient with
central differences.
"""

import numpy as np

from actdiff import autodiff as ad
from actdiff.autodiff import Tape, Tensor
from actdiff.gradcheck import check_gradients, grad_check

rng = np.random.default_rng(0)
W = Tensor(rng.standard_normal((4, 3)) * 0.1, requires_grad=True)
x = Tensor(rng.standard_normal((3, 16)))
y = Tensor(np.eye(4)[rng.integers(0, 4, 16)].T)

# %%
# One forward and backward pass. ``backward`` returns a dict keyed by tensor
# and also stores ``.grad`` on the leaves.
with Tape() as tape:
    loss = ad.mse(ad.softmax(ad.matmul(W, x), axis=0), y)
grads = tape.backward(loss)
print("loss", loss.item(), "| grad norm", np.linalg.norm(grads[W]))

# %%
# The same loss, differentiated numerically.
err = check_gradients(lambda: ad.mse(ad.softmax(ad.matmul(W, x), axis=0), y), [W])
print(f"max relative error vs central differences: {err:.2e}")

# %%
# Per-op checks run through ``grad_check``; shapes follow each op's convention
# (conv1d takes channels-last input and a (C_out, C_in, k) kernel).
for kind, shapes in [("conv1d", [(1, 8, 4), (5, 4, 3)]), ("group_norm", [(2, 3, 8)]), ("mish", [(4, 3)])]:
    print(f"{kind:>11}: {grad_check(kind, shapes, seed=1):.2e}")
