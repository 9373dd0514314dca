"""
DeepONet for periodic advection
===============================

Learns the map from a square-wave initial state to the solution half a period
later, in binary32 and in mixed precision.
"""

import os

import numpy as np

from precis.autodiff import B32
from precis.tasks import AdvectionTask
from precis.trainer import AdamConfig, PrecisionPolicy, train

ITERS = int(os.environ.get("PRECIS_DEMO_ITERS", 20000))
task = AdvectionTask()

# %%
# Train both policies
# -------------------

for name in ("full32", "mixed"):
    r = train(task, PrecisionPolicy.parse(name), AdamConfig(lr=task.lr), iters=ITERS, seed=0, eval_every=0)
    print(f"{name:>7}: test error {r.final_error:.2%}, byte ratio {r.bytes['byte_ratio']:.3f}, {r.seconds:.0f}s")

# %%
# One prediction
# --------------
# The exact solution is the input rotated by half the grid.

pred = task.predict(r.theta, B32)[0]
truth = task.test_set.u[0]
print("truth:", np.array2string(truth[::5], precision=2))
print("pred :", np.array2string(pred[::5], precision=2))
