"""
Fake quantization in a few lines
================================

"""

import numpy as np
from asgampq import QuantSpec, quantize
from asgampq.models import MLP
from asgampq.quantization import quant_error
from asgampq.supernet import Supernet

# a 2-bit signed grid is {-s, 0, s}; s is the absolute max of the tensor
x = np.array([-0.6, 0.2, 1.0])
print(quantize(x, QuantSpec(2)))

# unsigned grids start at zero (used after relu)
print(quantize(np.array([0.1, 0.4, 0.9]), QuantSpec(2, signed=False)))

# error against bitwidth on a weight-sized tensor
w = np.random.default_rng(0).normal(size=4096)
for b in (2, 3, 4, 6, 8):
    print(b, "bits  mse", quant_error(w, QuantSpec(b)))

# straight-through gradients of an 8-bit net vs the float net at the same weights
rng = np.random.default_rng(5)
X, y = rng.normal(size=(64, 6)), rng.integers(0, 3, 64)
for bits in (4, 8, 12, 16):
    q = Supernet([6, 10, 3], rng=1, layer_bits=[(bits, bits)] * 2)
    f = MLP([6, 10, 3], rng=1)
    for name, t in q.params.items():
        f.params[name].values[...] = t.values
    q.loss_and_grad((X, y))
    f.loss_and_grad((X, y))
    gq, gf = q.params.grad_vector(), f.params.grad_vector()
    print(bits, "bits  relative gradient gap", np.linalg.norm(gq - gf) / np.linalg.norm(gf))
