# # Demo 03 - The Gated Mixture
# Two expert classifiers see the same frame: a residual 1-D CNN meant for
# clean signals and a small transformer encoder meant for noisy ones. A gate
# network outputs one number per frame, and the prediction is the convex blend
# y = g * y_high + (1 - g) * y_low.

import numpy as np

from moeamc.models import MoEAMC, classify, preprocess
from moeamc.sigsynth import DatasetSpec, generate_dataset
from moeamc.tensorcore import Tensor

# ----
# ### Building the model
# All parameters live in one namespaced dictionary, which is what the
# optimizer and the checkpoint format work with.

model = MoEAMC(rng=np.random.default_rng(0))
counts = {}
for name, p in model.params.items():
    prefix = name.split(".")[0]
    counts[prefix] = counts.get(prefix, 0) + p.size
print("parameters per component:", counts)

# ----
# ### One forward pass
# Frames are scaled to unit average power before they reach the network.

ds = generate_dataset(DatasetSpec(frames_per_cell=1, seed=3))
x = Tensor(np.stack([preprocess(ex.frame).data for ex in ds]).astype(np.float32))
y, g, y_high, y_low = (t.data for t in model.forward_all(x, True))
print("output shape:", y.shape, " row sums within", float(np.abs(y.sum(axis=1) - 1).max()))
print("gate range on an untrained model:", float(g.min()), float(g.max()))
print("mixture stays between the experts:", bool(np.all(y >= np.minimum(y_high, y_low) - 1e-7)))

# ----
# ### Forcing the gate
# Pinning the gate's final bias far from zero hands the whole decision to one
# expert.

bias = model.params["gate.mlp.fc2.b"]
for b, name, expert in ((20.0, "high-SNR expert", model.hsrm), (-20.0, "low-SNR expert", model.lsrm)):
    bias.data[:] = b
    gap = np.abs(model(x).data - expert(x).data).max()
    print(f"bias {b:+.0f}: max distance to the {name} {gap:.1e}")

print("predicted classes for the first five frames:", classify(model(x))[:5])
