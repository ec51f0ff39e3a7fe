"""A tour of the reverse-mode autodiff core.

Builds a few small graphs, differentiates them, and cross-checks every
gradient against central finite differences. Also shows the masked
convolution primitive and the tensor blob format used by checkpoints.
"""

import os
import tempfile

import numpy as np

from vlae import autodiff as ad

rng = np.random.default_rng(0)

# --- scalars out of tensor graphs ------------------------------------------
x = ad.Parameter(rng.normal(size=(3, 4)), name="x")
y = ad.Tensor(rng.normal(size=(3, 4)))
loss = ad.reduce_sum(ad.mul(ad.sigmoid(x), y))
ad.backward(loss)
print("loss          :", f"{loss.item():+.6f}")
print("grad sample   :", np.round(x.grad[0, :3], 4))

# the same gradient from finite differences, via the built-in checker
rel = ad.grad_check(lambda t: ad.reduce_sum(ad.mul(ad.sigmoid(t), y)), x.data)
print("grad_check rel:", f"{rel:.2e}  (tolerance 1e-4)")

# --- masked convolution -----------------------------------------------------
# A mask zeroes kernel taps before the multiply, so masked connections are
# absent from both the forward pass and the gradient.
kernel = ad.Parameter(rng.normal(size=(2, 1, 3, 3)), name="k")
mask = np.zeros((2, 1, 3, 3))
mask[:, :, :1] = 1.0  # keep only the top row of each 3x3 kernel
img = ad.Tensor(rng.normal(size=(1, 1, 5, 5)))
out = ad.conv2d(img, kernel, mask, padding=1)
ad.backward(ad.reduce_sum(out))
print("masked-tap grad is zero:", bool(np.all(kernel.grad[:, :, 1:] == 0)))

# --- numeric guard rails ----------------------------------------------------
try:
    ad.log(ad.Tensor(np.array([-1.0])))
except ad.DomainError as exc:
    print("domain guard  :", exc)

# --- the tensor blob format -------------------------------------------------
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "x.ndt")
    ad.save_tensor(path, x.data)
    print("round trip ok :", bool(np.array_equal(ad.load_tensor(path), x.data)))
