"""Differentiating through a gradient step with the in-house autodiff core.

A scalar quadratic loss gets one SGD step, then a second loss is taken at the
stepped point. The derivative of that second loss with respect to a weight
that only enters through the step is compared to its closed form.
"""
import numpy as np

from mfm import gradcore as gc
from mfm.gradcore import Tensor

# inner loss: 0.5 * s * w**2, outer loss: 0.5 * (w_hat - 1)**2
w = Tensor(np.array(2.0), requires_grad=True)
s = Tensor(np.array(0.5), requires_grad=True)
lr = 0.1

inner = (s * w * w) * 0.5
g = gc.backward(inner, {"w": w}, create_graph=True)
w_hat = gc.virtual_sgd_step({"w": w}, g, lr)["w"]
outer = (w_hat - 1.0) ** 2 * 0.5
ds = gc.backward(outer, {"s": s})["s"].item()

# w_hat = w * (1 - lr * s), so d outer / d s = (w_hat - 1) * (-lr * w)
expected = (w_hat.item() - 1.0) * (-lr * w.item())
print(f"w_hat = {w_hat.item():.4f}")
print(f"d outer / d s: autodiff {ds:.10f}, closed form {expected:.10f}")

# the same machinery on a tiny conv layer: gradients flow through im2col
x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 6, 6)))
k = Tensor(np.random.default_rng(1).standard_normal((3, 1, 3, 3)), requires_grad=True)
loss = gc.tmean(gc.relu(gc.conv2d(x, k, pad=1)) ** 2)
grad = gc.backward(loss, {"k": k})["k"]
print("conv kernel gradient norm:", float(np.linalg.norm(grad.data)))
