"""
Relevance through a spiking network
===================================

Relevance starts at the output logit of the explained class and is pushed
back layer by layer.  Both propagation modes keep the total fixed at every
layer boundary; the time-resolved mode also shows where in time the
relevance ends up.
"""

import numpy as np

from eventrpg.relprop import RelPropConfig, propagate, redistribute_in_time
from eventrpg.snn import AvgPool2d, Conv2d, Flatten, Linear, Network, NeuronParams, Spiking, forward

rng = np.random.default_rng(7)
net = Network(
    [Conv2d(rng.normal(0.4, 0.4, (4, 2, 3, 3)), padding=1), Spiking(NeuronParams("LIF", tau=2.0)),
     AvgPool2d(2), Flatten(), Linear(rng.normal(0.1, 0.4, (16, 64))), Spiking(NeuronParams("IF")),
     Linear(rng.normal(0.0, 0.8, (3, 16)))],
    input_shape=(2, 8, 8), num_classes=3,
)
frames = rng.poisson(0.8, (6, 2, 8, 8)).astype(float)
logits, trace = forward(net, frames)
target = int(np.argmax(logits.mean(axis=0)))
print("time-mean logits:", np.round(logits.mean(axis=0), 3), "-> explaining class", target)

for mode in ("SLTRP", "SLRP"):
    for alpha in (1.0, 2.0):
        rel = propagate(net, trace, target, RelPropConfig.from_alpha(alpha, mode=mode))
        totals = [r.total() for r in rel.target]
        spread = max(totals) - min(totals)
        print(f"{mode:5s} alpha={alpha}: boundary totals {totals[-1]:+.6f} ... spread {spread:.1e}")

# where in time did the input relevance land?
rel = propagate(net, trace, target, RelPropConfig(mode="SLTRP"))
per_step = rel.input_target.values.sum(axis=(1, 2, 3))
print("input relevance per time step:", np.round(per_step, 4))

# the temporal split on its own: gamma[t] sends part of step t back to step t-1
gam = np.array([0.0, 0.5, 0.25, 0.8])
R_out = np.array([1.0, 1.0, 1.0, 1.0])
R_in = redistribute_in_time(gam, R_out)
print("gamma", gam, "R_out", R_out, "-> R_in", R_in, "sum", R_in.sum())
