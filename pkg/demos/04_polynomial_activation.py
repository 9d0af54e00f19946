"""
Degree-4 Hermite activations with range normalisation
=====================================================

The activation ``q * poly(x / q)`` keeps inputs of ``poly`` inside
``[-gamma, gamma]``.  During calibration ``q`` follows running maxima; at
inference it is frozen and the whole thing is one quartic per channel.
"""

import numpy as np

from gipfhe import hops
from gipfhe.packing import pack, unpack
from gipfhe.polyact import RELU, SILU, PolyActState, approx_error, fuse_inference, polyact_rn_forward, to_monomial
from gipfhe.slotvm import HEContext

print("ReLU power-basis coefficients:", to_monomial(RELU))
print("SiLU power-basis coefficients:", to_monomial(SILU))
for name, f in (("relu", RELU), ("silu", SILU)):
    mx, mean = approx_error(f, name, 3.0)
    print(f"{name}: max err {mx:.5f}, mean err {mean:.5f} on [-3, 3]")

# calibrate running maxima on a few batches
rng = np.random.default_rng(0)
state = PolyActState(channels=2, momentum=0.9)
for _ in range(30):
    polyact_rn_forward(rng.normal(scale=[[[2.0]], [[5.0]]], size=(8, 2, 4, 4)), state)
print("running maxima:", state.running_max)

# freeze and evaluate on packed data
state.mode = "inference"
coeffs = state.fused()
x = rng.normal(scale=3.0, size=(2, 4, 4))
ctx = HEContext(slot_count=16, max_level=4)
out = hops.polyact_eval(pack(x, 4, ctx), coeffs)
print("packed vs plaintext:", np.abs(unpack(out) - polyact_rn_forward(x, state)).max())
print("levels used:", ctx.max_level - out.level, "| counters:", ctx.counters)
print("fused q=2 equals 2*poly(x/2):", np.allclose(np.polyval(fuse_inference(RELU, 2.0)[::-1], 1.3),
                                               2 * np.polyval(to_monomial(RELU)[::-1], 0.65)))
