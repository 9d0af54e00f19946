"""
Homomorphic convolution past the slot limit
===========================================

An 8x8 map does not fit a 16-slot ciphertext.  With g = 2 it is held as four
interleaved 4x4 sub-channels and a 3x3 SAME convolution produces output in
the same layout; each output sub-channel sums masked rotations of all four
input sub-channels.
"""

import numpy as np

from gipfhe import hops, oracle
from gipfhe.packing import pack, unpack
from gipfhe.slotvm import HEContext

rng = np.random.default_rng(0)
ctx = HEContext(slot_count=16, max_level=5)
x = rng.uniform(-1, 1, (1, 8, 8))
w = rng.uniform(-1, 1, (1, 1, 3, 3))

p = pack(x, 4, ctx)
out = hops.conv2d(p, hops.ConvSpec(w))
print("input  g =", p.factor, "cts =", len(p.cts))
print("output g =", out.factor, "cts =", len(out.cts), "level =", out.level)
print("max |he - oracle| =", np.abs(unpack(out) - oracle.conv2d_ref(x, w)).max())
print("cost:", ctx.counters)

sched = hops.conv_schedule(p.layout, hops.ConvSpec(w), with_masks=False)
for o, row in enumerate(sched.terms):
    taps = [(i, a) for _, grp in row for i, a, _ in grp]
    print(f"out ct {o}: (input ct, rotation) = {taps}")

# strided: g 2 -> 1, then 1 -> 1/2 where channels get multiplexed
ctx.reset_counters()
w2 = rng.uniform(-1, 1, (4, 1, 3, 3))
y = hops.conv2d(p, hops.ConvSpec(rng.uniform(-1, 1, (1, 1, 3, 3)), stride=2))
z = hops.conv2d(y, hops.ConvSpec(w2, stride=2))
print("stride-2 chain factors:", p.factor, "->", y.factor, "->", z.factor, "| cts:", len(z.cts))
print("cost:", ctx.counters)

# transposed convolution brings the resolution back
d = hops.deconv2d(z, hops.DeconvSpec(rng.uniform(-1, 1, (4, 1, 2, 2)), stride=2))
print("deconv factor:", z.factor, "->", d.factor)
