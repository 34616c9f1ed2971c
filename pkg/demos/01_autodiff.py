"""
Reverse-mode gradients on numpy arrays
======================================

Tensors record the operations applied to them; ``backward`` walks the
graph in reverse and leaves gradients on every leaf that asked for one.
"""

import numpy as np

from resvit import functional as F
from resvit.gradcheck import grad_check, primitive_suite
from resvit.tensor import Parameter, Tensor, default_dtype

rng = np.random.default_rng(0)

# a 3x3 convolution followed by a squared-error loss
x = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
w = Parameter(rng.standard_normal((4, 2, 3, 3)) * 0.3)
loss = F.mse(F.relu(F.conv2d(x, w, padding=1)), 0.5)
loss.backward()
print("loss", loss.item())
print("grad shapes", x.grad.shape, w.grad.shape)

# the same gradient by central differences, in float64
with default_dtype(np.float64):
    x64 = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
    w64 = Parameter(rng.standard_normal((4, 2, 3, 3)))
    err = grad_check(lambda a, b: F.tanh(F.conv2d(a, b, padding=1)).sum(), [x64, w64])
print(f"max relative error vs finite differences: {err:.2e}")

# every primitive in the library, checked the same way
for name, e in primitive_suite(0)[:6]:
    print(f"  {name:<18s} {e:.1e}")
