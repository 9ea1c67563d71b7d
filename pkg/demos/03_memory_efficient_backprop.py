"""
Backpropagation from the layer input alone
==========================================

The gradual backward pass keeps only the layer input. It walks the segments
in reverse, restores each one to its input value, recomputes the unit and
backpropagates through it. Here we check it against an implementation that
stores every intermediate state, then compare memory accounts.
"""

import numpy as np

from gunn.arch import build_gunn15, stage_geometry
from gunn.engine import GRADUAL, NAIVE, SIMULTANEOUS, StageTape, gunn_backward, gunn_forward, peak_activation_bytes
from gunn.gradcheck import unrolled_backward
from gunn.network import make_gunn_layer

rng = np.random.default_rng(1)
layer = make_gunn_layer(rng, N=16, P=4, K=2, M=2)
x = rng.standard_normal((3, 16, 8, 8))
g = rng.standard_normal(x.shape)

tape = StageTape()
gunn_forward(x, layer, tape, update_stats=False)
gx, grads = gunn_backward(tape, layer, g)
ox, ograds, _ = unrolled_backward(x, layer, g)
print("input gradient difference:", np.abs(gx - ox).max())
print("largest parameter gradient difference:", max(np.abs(grads[k] - ograds[k]).max() for k in grads))

###############################################################################
# Accounted activation storage per GUNN-15 stage, batch 64, single precision.
# Naive stores a full copy of the state after every segment.

print(f"{'stage':>5} {'gradual MB':>11} {'simult. MB':>11} {'naive MB':>10}")
for i, (_, st, hw) in enumerate(stage_geometry(build_gunn15(), 32), start=1):
    shape = (64, st.config.N, hw, hw)
    mb = [peak_activation_bytes(st.config, shape, m, 4) / 2**20 for m in (GRADUAL, SIMULTANEOUS, NAIVE)]
    print(f"{i:>5} {mb[0]:>11.1f} {mb[1]:>11.1f} {mb[2]:>10.1f}")
