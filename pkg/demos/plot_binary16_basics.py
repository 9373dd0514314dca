"""
Binary16 rounding and overflow
==============================

What happens to a number when it is stored in half precision, and how a
squared-error term can overflow even though its final value is representable.
"""

import numpy as np

from precis import fp16
from precis.autodiff import B16, Tape
from precis.trainer import naive_ratio, stabilize_ratio

# %%
# Rounding to the nearest binary16 value
# --------------------------------------
# 0.1 has no exact binary representation; in half precision the nearest value
# is off by about 2.4e-5.

for x in (0.1, 1.0 / 3.0, 65504.0, 65520.0, 1e-7):
    info = fp16.inspect(x)
    kind = "subnormal" if info["subnormal"] else ""
    print(f"{x!r:>22} -> {info['value']!r:<24} {info['hex']}  {kind}")

# %%
# Relative error on the normal range
# ----------------------------------
# Every normal value is within a relative 2^-11 of its input.

rng = np.random.default_rng(0)
x = np.exp(rng.uniform(np.log(2.0**-14), np.log(6.0e4), 100_000)).astype(np.float32)
rel = np.abs(fp16.round_array(x).astype(np.float64) - x) / x
print(f"max relative error {rel.max():.3e}, unit roundoff {2.0**-11:.3e}")

# %%
# Overflow in a loss term
# -----------------------
# A^2 / B with A = 300 overflows at the A^2 step (90000 > 65504), while the
# algebraically equal (A / sqrt(B))^2 never leaves the representable range.

tape = Tape(B16)
A, B = tape.constant(np.array([300.0])), tape.constant(np.array([2.0]))
print("A^2/B        =", naive_ratio(A, B).item())
print("(A/sqrt B)^2 =", stabilize_ratio(A, B).item())
