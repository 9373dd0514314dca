"""
Reaching the critical region
============================

Gradient descent with rounded gradient points on a quadratic, and the same
check on a mixed-precision PINN run.
"""

import os

import numpy as np

from precis import theory
from precis.autodiff import B32
from precis.tasks import get_task
from precis.trainer import AdamConfig, PrecisionPolicy, train

# %%
# Quadratic testbed
# -----------------
# Gradients are evaluated at binary16-rounded parameters. Outside the region
# ||grad|| < c L ||theta|| the loss gap must shrink by at least eta/4 ||grad||^2.

rec = theory.quadratic_testbed(iters=int(os.environ.get("PRECIS_DEMO_ITERS", 3000)))
res = theory.check_testbed(rec)
print(f"c = {theory.REGION_CONSTANT:.6f}")
print(f"descent ok {res['descent_ok']}, decay ok {res['decay_ok']}, first in region at step {res['first_hit_iteration']}")
print(f"corollary: distance {res['corollary']['distance']:.3g} < {res['corollary']['distance_bound']:.3g}")

# %%
# Mixed-precision PINN
# --------------------
# The Lipschitz constant is replaced by the running maximum of local
# difference quotients of the binary32 reference gradient.

task = get_task("diffusion_validation")
iters = int(os.environ.get("PRECIS_DEMO_ITERS", task.iters))
run = train(task, PrecisionPolicy.parse("mixed"), AdamConfig(lr=task.lr), iters=iters, seed=0, eval_every=0, reference_format=B32)
out = theory.check_theorem1(run)
g, thr = out["series"]["grad_norm"], out["series"]["threshold"]
for it in np.linspace(0, len(g) - 1, 6).astype(int):
    print(f"iter {it:5d}: ||grad|| {g[it]:.3e}  threshold {thr[it]:.3e}")
print(f"satisfied over the final 10%: {out['satisfied_at_end']}, local estimates {out['lipschitz_range']}")
