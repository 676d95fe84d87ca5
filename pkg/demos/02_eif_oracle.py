"""Checking the efficient influence function on an exact discrete law.

On a finite support every expectation is a finite sum, so the ATE can be
evaluated exactly along a one-dimensional submodel p_eps = p0 (1 + eps g).
The derivative of the ATE at eps = 0 must equal the covariance of the
efficient influence function with the score g, for every mean-zero g.

Run: python demos/02_eif_oracle.py
"""

import numpy as np

from semicausal import true_ate
from semicausal.oracle import (
    Submodel,
    check_eif,
    efficient_influence_function,
    eif_covariance,
    ipw_influence_function,
    known_propensity_perturbation,
    pathwise_derivative,
    random_distribution,
    random_perturbation,
)

base = random_distribution(3, n_levels=2, n_outcomes=3)
print(f"base law: {len(base)} atoms, true ATE {true_ate(base):.6f}\n")

phi = efficient_influence_function(base)
rng = np.random.default_rng(0)
print("   d/deps ATE      E[phi g]        gap")
for _ in range(5):
    sub = Submodel(base, random_perturbation(base, rng))
    lhs, rhs = pathwise_derivative(sub, true_ate), eif_covariance(sub, phi)
    print(f"  {lhs: .9f}  {rhs: .9f}  {abs(lhs - rhs):.1e}")

# The IPW influence function only represents the derivative along scores
# that leave the propensity fixed, and it has a larger variance.
gs = [known_propensity_perturbation(base, random_perturbation(base, rng)) for _ in range(10)]
eif, ipw = check_eif(base, phi, gs), check_eif(base, ipw_influence_function(base), gs)
print(f"\nknown-propensity scores: EIF passed {eif.passed}, IPW passed {ipw.passed}")
print(f"exact variance: EIF {eif.variance:.4f} <= IPW {ipw.variance:.4f}")
generic = check_eif(base, ipw_influence_function(base), [random_perturbation(base, s) for s in range(10)])
print(f"generic scores: IPW passed {generic.passed}")
