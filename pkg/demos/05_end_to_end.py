"""
Convert, plan and run a small CNN
=================================

A ReLU/MaxPool network is converted to polynomial activations and average
pooling, then planned (layouts, levels, bootstraps) and executed on packed
data.  The planner's operation counts are checked against what the simulator
measured, and the output against the plaintext pipeline.
"""

import numpy as np

from gipfhe import graphrt
from gipfhe.graphrt import ModelGraph, Node
from gipfhe.packing import pack, unpack
from gipfhe.slotvm import HEContext

rng = np.random.default_rng(0)
model = ModelGraph((1, 16, 16), [
    Node("conv1", "conv", {}, {"weight": rng.uniform(-0.3, 0.3, (4, 1, 3, 3))}),
    Node("bn1", "batchnorm", {}, {"scale": rng.uniform(0.5, 1.5, 4), "shift": rng.uniform(-0.1, 0.1, 4)}),
    Node("relu1", "activation", {"fn": "relu"}),
    Node("pool1", "maxpool", {"window": 2}),
    Node("conv2", "conv", {"stride": 2}, {"weight": rng.uniform(-0.2, 0.2, (4, 4, 3, 3))}),
    Node("relu2", "activation", {"fn": "relu"}),
    Node("up", "deconv", {"stride": 2}, {"weight": rng.uniform(-0.3, 0.3, (4, 4, 2, 2))}),
    Node("res", "add", {"skip": "pool1"}),
])

fhe_model, summary = graphrt.convert_model(model, "relu")
print("\n".join(summary))

ctx = HEContext(slot_count=64, max_level=6)
entries = graphrt.plan(fhe_model, ctx, base_size=8)
print(graphrt.plan_table(entries))

x = rng.uniform(-1, 1, (1, 16, 16))
out, rep = graphrt.execute(fhe_model, pack(x, 8, ctx), entries)
print()
print(graphrt.report(rep))
print("max |packed - oracle| =", np.abs(unpack(out) - graphrt.oracle_forward(fhe_model, x)).max())
