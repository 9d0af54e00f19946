"""
Generalized interleaved packing
===============================

Feature maps larger than a ciphertext are split into interleaved sub-channels
(g > 1); small ones share a ciphertext with other channels (g < 1).  At g = 1
both layouts coincide.
"""

import numpy as np

from gipfhe.packing import GipLayout, index_map, pack, propagate_factor, unpack
from gipfhe.slotvm import HEContext

ctx = HEContext(slot_count=16)

# a 4x4 map against base size 2: g = 2, four "colours" of pixels
x = np.arange(16.0).reshape(1, 4, 4)
p = pack(x, 2, ctx)
print("g =", p.factor, "ciphertexts:", len(p.cts))
for k, ct in enumerate(p.cts):
    print(f"  ct {k}: {ct.slots[:4]}")

# four 2x2 channels against base size 4: g = 1/2, one multiplexed ciphertext
y = np.arange(16.0).reshape(4, 2, 2)
q = pack(y, 4, ctx)
print("g =", q.factor, "ciphertexts:", len(q.cts))
print("  slots grid:\n", q.cts[0].slots.reshape(4, 4))
print("  channel 1, pixel (0,0) ->", index_map(q.layout, 1, 0, 0))

assert np.array_equal(unpack(p), x) and np.array_equal(unpack(q), y)

# how the factor moves through a small network
g = propagate_factor(4, "preserve")
for kind, s in [("downsample", 2), ("downsample", 2), ("downsample", 2), ("upsample", 2)]:
    g_next = propagate_factor(g, kind, s)
    print(f"{kind:10s} stride {s}: g {g} -> {g_next}")
    g = g_next

print("ct count for 8 channels at g=1/4:", GipLayout(8, 2, 8, 64).num_cts)
