# # Demo 02 - Reverse-Mode Autodiff and Gradient Checks
# The models are built on a small numpy tensor library. This walkthrough runs
# a forward pass, calls `backward`, and then confirms the gradients against
# central finite differences.

import math

import numpy as np

from moeamc import tensorcore as tc
from moeamc.selftest import SHIFT_INVARIANT, moe_loss_case, primitive_cases
from moeamc.tensorcore import Tensor

# ----
# ### A two-layer classifier by hand
# Leaves created with `requires_grad=True` collect gradients; everything else
# is a constant.

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((5, 4)))
w1 = Tensor(rng.standard_normal((4, 6)) * 0.5, requires_grad=True)
w2 = Tensor(rng.standard_normal((6, 3)) * 0.5, requires_grad=True)
labels = np.array([0, 2, 1, 1, 0])

probs = tc.softmax(tc.matmul(tc.relu(tc.matmul(x, w1)), w2), axis=-1)
loss = tc.cross_entropy(probs, labels)
loss.backward()
print(f"loss {loss.item():.4f} (ln 3 = {math.log(3):.4f})")
print("grad w2 shape:", w2.grad.shape)

# ----
# ### Checking against finite differences
# `grad_check` perturbs each parameter by +/- h, re-runs the function and
# reports the worst relative error.

err = tc.grad_check(lambda: tc.cross_entropy(tc.softmax(tc.matmul(tc.relu(tc.matmul(x, w1)), w2)), labels), [w1, w2])
print(f"two-layer net: max relative error {err:.2e}")

for name, (f, params) in primitive_cases().items():
    print(f"{name:>32}: {tc.grad_check(f, params):.2e}")

# ----
# ### The full mixture
# The complete model is checked in double precision on a four-example batch.
# Coordinates are subsampled to keep the run short. The attention key bias is
# left out: softmax ignores a per-query shift, so its gradient is exactly zero
# and a finite difference there measures only rounding noise.

model, f = moe_loss_case()
checked = {n: p for n, p in model.params.items() if n not in SHIFT_INVARIANT}
print(f"mixture loss: max relative error {tc.grad_check(f, checked, max_coords=256):.2e}")
