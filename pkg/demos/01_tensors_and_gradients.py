"""The tensor engine: float64 arrays, a gradient tape, and exact replay.

Every number the library produces flows through this engine, so this demo
starts at the bottom: record a few operations on a tape, run the reverse
sweep, and cross-check one gradient against a finite difference.
"""

import numpy as np

from tinytraj import autodiff as ad
from tinytraj.autodiff import Tape, Tensor

print("=== 1. forward arithmetic ===")
a = Tensor([[1.0, 2.0], [3.0, 4.0]])
b = Tensor([[0.5, -1.0], [2.0, 0.0]])
product = ad.matmul(a, b)
print("a @ b =\n", product.data)

print("\n=== 2. taped forward + reverse sweep ===")
# watch leaves on a tape, build a scalar, then pull gradients back
tape = Tape()
w = tape.watch(Tensor(np.array([[0.3, -0.2], [0.1, 0.4]]), requires_grad=True))
x = Tensor([[1.0, 2.0]])
hidden = ad.gelu(ad.matmul(x, w))
loss = ad.mean(ad.mul(hidden, hidden))
ad.backward(loss)
print("loss       =", loss.data)
print("dloss/dw   =\n", w.grad)

print("\n=== 3. finite-difference cross-check ===")
def loss_at(values):
    h = ad.gelu(ad.matmul(x, Tensor(values)))
    return float(ad.mean(ad.mul(h, h)).data)

eps = 1e-6
numeric = np.zeros_like(w.data)
for i in range(2):
    for j in range(2):
        up, down = w.data.copy(), w.data.copy()
        up[i, j] += eps
        down[i, j] -= eps
        numeric[i, j] = (loss_at(up) - loss_at(down)) / (2 * eps)
print("numeric    =\n", numeric)
print("max |diff| =", np.abs(numeric - w.grad).max())
assert np.abs(numeric - w.grad).max() < 1e-8

print("\n=== 4. determinism ===")
# the same forward twice is bit-identical, not merely close
first = ad.softmax_rows(Tensor(np.random.default_rng(0).normal(0, 3, (4, 6)))).data
second = ad.softmax_rows(Tensor(np.random.default_rng(0).normal(0, 3, (4, 6)))).data
print("softmax reruns identical:", np.array_equal(first, second))
assert np.array_equal(first, second)
