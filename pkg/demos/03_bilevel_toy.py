"""The two-timescale optimizer on a problem with a known answer.

Weights w train against L_train(w, a) = (w - a)^2 while the architecture
variable a trains against L_val(w) = w^2, but only through the response
of w to a. On this quadratic the exact hypergradient is available in
closed form, so we can watch the estimator hit it, then run the
alternating loop and watch both variables collapse to zero.
"""

import numpy as np

from cellgrow import BilevelConfig, Tensor
from cellgrow.autodiff import hadamard, sub, sum_all
from cellgrow.bilevel import AdamState, ModelState, arch_step, second_order_hypergrad, weight_step


def make_state(w0, a0):
    return ModelState(
        weights={0: Tensor([[w0]], requires_grad=True)},
        alphas={0: Tensor([[a0]], requires_grad=True)},
    )


def make_loss(state):
    def loss_fn(batch):
        w, a = state.weights[0], state.alphas[0]
        if batch == "train":
            d = sub(w, a)
            return sum_all(hadamard(d, d))
        return sum_all(hadamard(w, w))

    return loss_fn


# 1. the estimator against the closed form
w0, a0, xi = 1.5, -0.8, 0.1
state = make_state(w0, a0)
hyper, _ = second_order_hypergrad(state, make_loss(state), "train", "val", BilevelConfig(xi=xi))
w_prime = w0 - 2 * xi * (w0 - a0)
exact = 4 * xi * w_prime  # d/da of (w - xi dL_train/dw)^2
print(f"hypergradient: estimated {hyper[0][0, 0]:+.6f}, closed form {exact:+.6f}")

# 2. the alternating loop; w chases a, a drags w toward the origin
# (the architecture rate is kept well below the weight rate, as in the
# real search, otherwise the pair orbits instead of settling)
cfg = BilevelConfig(lr_w=0.05, lr_alpha=0.01)
state = make_state(1.5, -0.8)
loss_fn = make_loss(state)
w_opt = AdamState(cfg.lr_w, cfg.beta1, cfg.beta2, cfg.eps_adam)
a_opt = AdamState(cfg.lr_alpha, cfg.beta1, cfg.beta2, cfg.eps_adam)
for step in range(1, 801):
    arch_step(state, a_opt, loss_fn, "train", "val", cfg)
    weight_step(state, w_opt, loss_fn, "train")
    if step % 200 == 0:
        w = state.weights[0].data[0, 0]
        a = state.alphas[0].data[0, 0]
        print(f"step {step:3d}: w={w:+.5f} a={a:+.5f} val={w * w:.2e}")
