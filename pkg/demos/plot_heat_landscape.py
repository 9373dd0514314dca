"""
NaN regions in a half-precision loss landscape
==============================================

Evaluates the heat-equation PINN loss on a 2D slice around the weights after
one training step. In binary16 parts of the slice overflow to NaN once the
slice reaches far enough from the weights; a half-width of 2 shows them,
while the default half-width of 1 stays finite.
"""

import numpy as np

from precis.diagnostics import landscape_slice
from precis.tasks import get_task
from precis.trainer import AdamConfig, PrecisionPolicy, evaluate_loss, train

task = get_task("heat")

# %%
# Weights after one step, then the slice
# --------------------------------------
# Both slices use the same filter-normalised directions.

directions = None
for name in ("full32", "pure16"):
    policy = PrecisionPolicy.parse(name)
    seen = {}
    train(task, policy, AdamConfig(lr=task.lr), iters=2, seed=0, eval_every=0, callback=lambda it, th: seen.__setitem__(it, th.copy()))
    theta = seen[1].astype(np.float64)
    mf, cf = policy.master_format, policy.compute_format
    s = landscape_slice(
        lambda p: evaluate_loss(task, mf.round(p), cf, policy),
        theta,
        half_width=2.0,
        resolution=21,
        blocks=task.model.blocks,
        directions=directions,
    )
    directions = (s.delta, s.eta)
    print(f"{name:>7}: NaN fraction {s.nan_fraction:.3f}, centre loss {s.center:.4g}")
    # a coarse text map, '#' marks a non-finite node
    for row in s.nan_mask[::4]:
        print("        " + "".join("#" if m else "." for m in row[::2]))
