"""Two models, one observed distribution, two causal answers.

Run with ``python demos/nonidentification.py``. The second model is built from
the first by swapping the outcome copula c(Y, Z | A) for independence while
keeping P(A, Y), P(Z) and c(Z, A). Nothing observable changes, yet P(Y(a*))
moves. The sharp copula bounds cover both answers.
"""

import numpy as np

from multicause import make_confounded_pair, observed_joint
from multicause.scm import default_template, full_joint, ground_truth_po
from multicause.sensitivity import copula_bounds
from multicause.tables import conditional_array, marginalize

A_STAR = (1, 1, 1)

template = default_template()
first, second, tv = make_confounded_pair(template, A_STAR)

obs_diff = np.abs(observed_joint(first).probs - observed_joint(second).probs).max()
po_1 = ground_truth_po(first, A_STAR).dist
po_2 = ground_truth_po(second, A_STAR).dist
causes = list(first.cause_names)
naive = conditional_array(observed_joint(second), ["Y"], causes)[0][A_STAR]

print(f"largest observed-cell difference: {obs_diff:.2e}")
print(f"P(Y(a*)) in model 1: {np.round(po_1, 4)}")
print(f"P(Y(a*)) in model 2: {np.round(po_2, 4)}  (TV gap {tv:.4f})")
print(f"P(Y | A = a*):       {np.round(naive, 4)}  (model 2 equals it: {np.allclose(po_2, naive, atol=1e-12)})")

joint = marginalize(full_joint(first), causes + ["Y", "Z"])
margin_y = conditional_array(joint, ["Y"], causes)[0][A_STAR]
margin_z = conditional_array(joint, ["Z"], causes)[0][A_STAR]
region = copula_bounds(margin_y, margin_z, first.p_z, np.array([0.0, 1.0]))
print(f"sharp bounds on P(Y(a*) = 1): [{region.lower:.4f}, {region.upper:.4f}] "
      f"covering {po_1[1]:.4f} and {po_2[1]:.4f}")
