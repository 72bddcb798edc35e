"""Calibration weights on a toy sample.

Eight of twenty units are observed with design weight 2.5.  Their weighted
count is right but their weighted total of ``a`` is not.  Raking and the
chi-square distance both restore the known totals, with slightly different
weights.
"""

import numpy as np

import triphase as tp

rng = np.random.default_rng(3)
n = 20
a = np.round(rng.gamma(4.0, 2.0, n), 1)
R = np.zeros(n, bool)
R[rng.choice(n, 8, replace=False)] = True
d = np.full(n, n / R.sum())
A = np.column_stack([np.ones(n), a])
totals = A.sum(axis=0)

print("population totals      ", totals)
print("design-weighted totals  ", (R * d) @ A)

for dist in ("poisson_deviance", "chi_square"):
    cw = tp.calibrate(d, R, A, totals, dist)
    print(f"\n{dist}: lambda = {np.round(cw.lam, 5)}, iterations = {cw.iterations}")
    print("  calibrated totals ", np.round(cw.w @ A, 10))
    print("  g on sampled units", np.round(cw.g[R], 3))
