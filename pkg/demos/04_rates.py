"""Why nuisance rates matter: root-n bias with synthetic nuisances.

The nuisances are set to the truth plus errors of order n^(-r).  The AIPW
bias is a product of the two errors, of order n^(-(r_pi + r_mu)), so root-n
times the bias shrinks when r_pi + r_mu > 1/2 and grows when it is below.

Run: python demos/04_rates.py   (about a minute)
"""

from semicausal.simulation import DGPSpec, rate_experiment

for r in (0.3, 0.15):
    out = rate_experiment(DGPSpec(rate_pi=r, rate_mu=r), n_grid=(1_000, 10_000, 100_000), reps=500, seed=7)
    print(f"r_pi = r_mu = {r}: expected trend {out['expected_trend']}")
    for row in out["rows"]:
        print(f"  n={row['n']:>7}  sqrt(n) bias {row['sqrt_n_bias']:+.4f}  "
              f"exact {row['sqrt_n_exact_bias']:+.4f}  (mc se {row['mc_se']:.4f})")
