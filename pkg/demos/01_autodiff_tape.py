"""A tour of the reverse-mode tape.

Builds a small expression out of the matrix primitives, pulls gradients
off the tape, and checks a few of them against central finite
differences. Every model in this package ultimately trains through this
machinery, so it is worth seeing it bare.
"""

import numpy as np

from cellgrow import Tape, Tensor, numerical_gradient
from cellgrow.autodiff import matmul, mse, sigmoid, tanh

rng = np.random.default_rng(0)

# two parameters and one input batch
w1 = Tensor(rng.standard_normal((3, 4)) * 0.5, requires_grad=True)
w2 = Tensor(rng.standard_normal((4, 2)) * 0.5, requires_grad=True)
x = Tensor(rng.standard_normal((8, 3)))
y = Tensor(rng.standard_normal((8, 2)))


def forward():
    hidden = tanh(matmul(x, w1))
    return mse(sigmoid(matmul(hidden, w2)), y)


with Tape() as tape:
    loss = forward()
    grads = tape.backward(loss)

print(f"loss = {loss.data[0, 0]:.6f}")
print(f"grad shapes: w1 {grads[w1.tid].shape}, w2 {grads[w2.tid].shape}")

# numerical_gradient perturbs one entry at a time and replays the forward
def loss_value(_):
    return float(forward().data[0, 0])


num_w1, num_w2 = numerical_gradient(loss_value, [w1.data, w2.data])
for name, t, num in (("w1", w1, num_w1), ("w2", w2, num_w2)):
    err = np.max(np.abs(num - grads[t.tid])) / max(np.max(np.abs(num)), 1e-12)
    print(f"{name}: max rel err vs finite differences = {err:.2e}")

# gradients accumulate across shared subexpressions; a tensor used twice
# gets the sum of both paths
a = Tensor(np.array([[2.0]]), requires_grad=True)
with Tape() as tape:
    out = mse(matmul(a, a), Tensor(np.array([[0.0]])))
    grads = tape.backward(out)
print(f"d/da mean((a@a)^2) at a=2: got {grads[a.tid][0, 0]:.1f}, expected {2 * 4.0 * 2 * 2:.1f}")
