"""
Fusing more sensors is not always better
========================================

Three scalar sensors all declare unit noise, but the third one is really
much noisier. Weighted least squares trusts it as much as the others, so
the full fusion loses to the honest pair.
"""

import numpy as np

from selective_fusion.estimation import MeasurementModel, batch_fuse, compare_subsets

honest = MeasurementModel([[1.0]], [[1.0]])
models = [honest, honest, honest]
true_covs = [[[1.0]], [[1.0]], [[100.0]]]

# Declared covariance of the fused estimate, identical for any measurement.
print("declared variance, all three:", batch_fuse(models, [[0.0]] * 3).covariance[0, 0])
print("declared variance, first two:", batch_fuse(models[:2], [[0.0]] * 2).covariance[0, 0])

subsets = {"all": [0, 1, 2], "s1+s2": [0, 1], "s1": [0]}
for r in compare_subsets([0.0], models, true_covs, subsets, trials=10_000, seed=0):
    print(f"{r.subset_id:>6s}: empirical MSE {r.mean_squared_error:7.3f} +/- {r.std_error:.3f}")

# Sweep the hidden noise of the third sensor to find where it stops helping.
for var in (1.0, 2.0, 3.0, 5.0, 10.0):
    res = {r.subset_id: r.mean_squared_error
           for r in compare_subsets([0.0], models, [[[1.0]], [[1.0]], [[var]]], subsets, 10_000, seed=1)}
    print(f"true variance {var:5.1f}: all {res['all']:.3f}  pair {res['s1+s2']:.3f}")
