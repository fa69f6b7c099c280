"""
Saliency maps, CAM and RelCAM
=============================

Train the small two-layer spiking net on two moving-bar classes, then look
at what each map kind highlights and which box the augmentation step would
cut around it.
"""

import numpy as np

from eventrpg.events import to_frames
from eventrpg.relprop import RelPropConfig
from eventrpg.saliency import bbox_from_map, explain
from eventrpg.trainer import SyntheticSpec, TrainConfig, build_convnet, generate_dataset, train

SHADES = " .:-=+*#%@"


def show(values):
    for row in values:
        print("    " + "".join(SHADES[min(int(v * len(SHADES)), len(SHADES) - 1)] for v in row))


spec = SyntheticSpec(classes=2, canvas=(16, 16), train_size=120, test_size=40, seed=1)
train_set, test_set = generate_dataset(spec)
net = build_convnet((2, 16, 16), channels=4, hidden=32, num_classes=2, seed=0, time_steps=4)
result = train(net, (train_set, test_set), TrainConfig(epochs=8))
print(f"test accuracy after {len(result.history)} epochs: {result.history[-1]['test_accuracy']:.2f}")

stream, label = test_set[0]
frames = to_frames(stream, 4, 16, 16)
print(f"\nsample class {label} ({spec.patterns[label]}), event density:")
show(frames.data.sum(axis=(0, 1)) / frames.data.sum(axis=(0, 1)).max())

for kind in ("saliency", "cam", "relcam"):
    for mode in ("SLRP", "SLTRP"):
        smap = explain(result.network, frames, label, kind, RelPropConfig(mode=mode))
        box = bbox_from_map(smap, 0.25)
        print(f"\n{kind} / {mode}: box at ({box.x}, {box.y}) size {box.w}x{box.h}")
        if mode == "SLRP":
            show(smap.values)
