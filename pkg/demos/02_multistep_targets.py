"""
Multi-step consistency targets
==============================

A step-conditioned field v(x, t, d) should agree with itself: one jump of
size k*d ought to land where k small steps of size d land.  The training
targets are the running means of the small-step velocities.
"""

import numpy as np
from mscfm.flow import rollout_targets, sample_step_grid
from mscfm.velocity import VelocityModel

model = VelocityModel.init(2, 0, (32, 32), seed=0)
model = model.with_params(model.params + 0.1 * np.random.default_rng(1).standard_normal(model.n_params))

rng = np.random.default_rng(2)
n = 4
t, d = sample_step_grid(rng, n, 6)
x = rng.standard_normal((6, 2))
print("start times", t, "\nstep sizes ", d)

tg = rollout_targets(model, x, None, t, d, n)
# walk the small steps and compare with the big jumps the targets imply
walk = x.copy()
for k in range(n):
    walk = walk + d[:, None] * tg.velocities[k]
    if k:
        jump = x + (k + 1) * d[:, None] * tg.target(k + 1)
        print(f"k={k + 1}: |jump - walk| = {np.abs(jump - walk).max():.1e}")

# with n = 2 the target is the usual shortcut rule: mean of two half steps
tg2 = rollout_targets(model, x, None, t, d, 2)
v0 = model(x, None, t, d)
v1 = model(x + v0 * d[:, None], None, t + d, d)
print("n=2 equals (v0 + v1) / 2:", np.array_equal(tg2.target(2), (v0 + v1) / 2))
