"""
Sharp and flat minima on a 1-D landscape
========================================

The landscape has a deep narrow well at -2 and a shallower wide well at +2.
"""

import numpy as np
from asgampq.models import landscape_model
from asgampq.optim import AsgaParams, OptimizerState, step
from asgampq.sharpness import landscape_probe, two_minima, two_minima_grad

# surrogate gap h = max over the rho-ball minus the center value
for rho in (0.05, 0.1, 0.2, 0.3):
    sharp, flat = landscape_probe(two_minima, [-2.0, 2.0], [rho])
    print(f"rho={rho:.2f}  h(sharp)={sharp['gap']:.4f}  h(flat)={flat['gap']:.4f}")

params = AsgaParams(rho0=0.1, rho_max=0.3, phi=0.5, mu=0.05, epsilon=1.0, lr=0.05)


def run(method, x0, steps=500):
    model = landscape_model(two_minima, two_minima_grad, [x0])
    state = OptimizerState()
    for _ in range(steps):
        step(method, model, None, params, state)
    return model.theta[0]


for x0 in (-2.28, -2.14, -1.8, -1.0, 0.5):
    print(f"x0={x0:+.2f}  sgd -> {run('sgd', x0):+.3f}   asga -> {run('asga', x0):+.3f}")

# SGD at this step size bounces on the sharp well's rim rather than settling:
# the curvature there is ~360, so lr * curvature >> 2
x = np.linspace(-2.3, -1.7, 7)
print(np.round(two_minima(x), 3))
