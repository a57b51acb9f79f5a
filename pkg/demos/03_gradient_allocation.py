"""
Adaptive gradient allocation
============================

Two losses, two gradients.  Instead of adding them, pick mixing weights
so the combined step's projection on the consistency direction is c times
its projection on the flow-matching direction.
"""

import numpy as np
from mscfm.aga import AgaState, alpha_closed_form, c_validity, combine, grad_stats, pcgrad_project

g_fm = np.array([2.0, 0.0, 0.0])
g_mc = np.array([0.3, 1.0, 0.0])
st = grad_stats(g_fm, g_mc)
print(f"A={st.A:.3f} B={st.B:.3f} cos={st.delta:.3f}")

for c in (1.0, 0.5, 0.1):
    a1, a2 = alpha_closed_form(st.A, st.B, st.delta, c)
    step = a1 * g_fm + a2 * g_mc
    print(f"c={c}: valid={c_validity(st.A, st.B, st.delta, c)} alpha1={a1:.3f} "
          f"proj ratio={(step @ st.u2) / (step @ st.u1):.3f}")

# early in training the gradients are projected against each other instead
print("pcgrad on a conflicting pair:", pcgrad_project(np.array([1.0, 0.0]), np.array([-1.0, 1.0])))

# combine() picks the branch; warm-up first, the closed form afterwards
state = AgaState(c=0.5, n_start=1)
for _ in range(2):
    _, diag = combine(state, g_fm, g_mc, 1.0, 0.5)
    print(diag["branch"], round(diag["alpha1"], 3))
