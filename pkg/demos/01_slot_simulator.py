"""
Simulated CKKS slot arithmetic
==============================

A ciphertext is modelled as a vector of S real slots plus a level.  Additions
and rotations are free in levels; every multiplication costs one, and a
bootstrap restores the budget.
"""

import numpy as np

from gipfhe.slotvm import HEContext, add_ct, bootstrap, mul_ct, mul_plain, rotate

ctx = HEContext(slot_count=8, max_level=3)
a = ctx.encrypt([1, 2, 3, 4, 5, 6, 7, 8])
b = ctx.encrypt(np.ones(8))

# component-wise ops act on all slots at once
print("a + b      ", add_ct(a, b).slots)
print("a * 2      ", mul_plain(a, ctx.plain(np.full(8, 2.0))).slots)

# rotation by r moves slot i+r to slot i
print("rotate(a,2)", rotate(a, 2).slots)
print("rotate(a,-1)", rotate(a, -1).slots)

# squaring three times exhausts a level-3 ciphertext
x = a
for _ in range(3):
    x = mul_ct(x, x)
print("level after three squarings:", x.level)
x = bootstrap(x)
print("level after bootstrap:", x.level)

print("counters:", ctx.counters)
