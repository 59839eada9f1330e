"""
Where the temporal gradient lives
=================================

Train-time credit assignment in a spiking network can flow along two axes:
down through the layers at each step, and back through time via the membrane
leak and recurrent weights. STBP keeps both, SDBP keeps only the first. This
script builds one small recurrent network and shows that the difference
between the two is exactly the cross-time part, and that STBP agrees with a
finite-difference probe of the smooth forward pass.
"""

import numpy as np

from stprobe.engine import (LifParams, Surrogate, backward_sdbp, backward_stbp, init_network,
                            lif_forward, sequence_loss, smooth_forward)
from stprobe.numerics import Rng64

rng = np.random.default_rng(0)
net = init_network(3, [6], 4, Rng64(7), recurrent=True, recurrent_init="uniform",
                   lif=LifParams(decay=0.8, threshold=0.5),
                   surrogate=Surrogate("sigmoid", k=4.0))
x = rng.uniform(0.0, 1.5, size=(2, 5, 3))     # (batch, time, channels)
labels = np.array([1, 3])

###############################################################################
# Spiking forward pass, then both backward passes from the same loss.

trace = lif_forward(x, net)
loss, g = sequence_loss(trace, labels, per_step=False)
stbp = backward_stbp(trace, g)
sdbp = backward_sdbp(trace, g)
print(f"loss {loss:.4f}, spikes fired {int(trace.s[0].sum())}")
for name in stbp:
    gap = np.linalg.norm(stbp[name] - sdbp[name])
    print(f"  {name:12s} |STBP| {np.linalg.norm(stbp[name]):.4f}  |STBP - SDBP| {gap:.4f}")

###############################################################################
# The loss reads the final step only. SDBP can then reach just the last
# step's inputs, while STBP also credits earlier steps through the leak.

###############################################################################
# Finite-difference check. The smooth forward replaces the spike with its
# surrogate primitive, which makes the loss differentiable so a central
# difference can be compared with the analytic STBP gradient.


def smooth_loss(params):
    saved = {k: v.copy() for k, v in net.named_params().items()}
    for k, v in params.items():
        net.named_params()[k][...] = v
    value = sequence_loss(smooth_forward(x, net), labels, per_step=False)[0]
    for k, v in saved.items():
        net.named_params()[k][...] = v
    return value


tr = smooth_forward(x, net)
_, g = sequence_loss(tr, labels, per_step=False)
analytic = backward_stbp(tr, g)["layers.0.V"]
params = {k: v.copy() for k, v in net.named_params().items()}
eps = 1e-5
numeric = np.zeros_like(analytic)
for idx in np.ndindex(*analytic.shape):
    up = {k: v.copy() for k, v in params.items()}
    down = {k: v.copy() for k, v in params.items()}
    up["layers.0.V"][idx] += eps
    down["layers.0.V"][idx] -= eps
    numeric[idx] = (smooth_loss(up) - smooth_loss(down)) / (2 * eps)
print(f"recurrent weight gradient, max |analytic - numeric| = "
      f"{np.max(np.abs(analytic - numeric)):.2e}")
