"""
Two ways to measure sharpness
=============================

sigma_gap = 2 h / rho^2 from one ascent step, and the top Hessian eigenvalue
from power iteration on finite-difference Hessian-vector products.
"""

import numpy as np
from asgampq.models import MLP, QuadraticModel
from asgampq.sharpness import sharpness_report

# on a quadratic at its minimum both agree with the eigensolver
A = np.diag([1.0, 10.0])
rep = sharpness_report(QuadraticModel(A, [0.0, 0.0]), None, 0.1, power_iters=50,
                       at_eigvector=True)
print(rep)

# away from a minimum h also carries the first-order term rho * |g|, so
# sigma_gap overshoots the curvature and shrinks like 1/rho
rng = np.random.default_rng(0)
net = MLP([8, 32, 3], rng=0)
X, y = rng.normal(size=(128, 8)), rng.integers(0, 3, 128)
for rho in (0.01, 0.05, 0.1):
    r = sharpness_report(net, (X, y), rho, power_iters=30)
    print(f"rho={rho}  sigma_gap={r.sigma_gap:.3f}  power={r.sigma_power:.3f}")
