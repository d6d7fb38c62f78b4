"""Splitting a saturated neuron along its sharpest descent direction.

A single sigmoid unit is fit to a double step, a target it cannot
represent, until gradient descent stalls. The local curvature of the
loss restricted to symmetric unit splits (the splitting matrix) then has
a negative eigenvalue, and nudging two copies of the unit apart along
that eigenvector escapes the plateau in a way plain training does not.
"""

import numpy as np

from cellgrow import MorphConfig, Tape, Tensor, build_two_to_one, grow_operator_split, split_report
from cellgrow.autodiff import mse
from cellgrow.cells import cell_forward
from cellgrow.morphism import LOG_ZERO, LossContext, clone_spec, clone_state

# a target with two transitions; one sigmoid can model only one of them
x = np.linspace(-3.0, 3.0, 32)[:, None]
y = 0.5 / (1.0 + np.exp(-6.0 * (x - 1.2))) + 0.5 / (1.0 + np.exp(-6.0 * (x + 1.2)))
h = np.zeros((32, 1))


def train(spec, state, steps, lr=4.0):
    tx, th, ty = Tensor(x), Tensor(h), Tensor(y)
    tensors = list(state.weights.values()) + list(state.alphas.values())
    loss_val = None
    for _ in range(steps):
        with Tape() as tape:
            loss = mse(cell_forward(spec, state, tx, th), ty)
            grads = tape.backward(loss)
        for t in tensors:
            g = grads.get(t.tid)
            if g is not None:
                t.data -= lr * g
        loss_val = float(loss.data[0, 0])
    return loss_val


spec, state = build_two_to_one(1, 1, 1, seed=4)
row = np.full(5, LOG_ZERO)
row[0] = 0.0  # lock the mixture to the sigmoid op
state.alphas[spec.edges[0].edge_id] = Tensor(row[None, :], requires_grad=True)

loss = train(spec, state, steps=1500)
print(f"single unit after 1500 steps: loss {loss:.6f} (stalled)")

report = split_report(spec, state, spec.edges[0], LossContext(x, h, target=y))
entry = report.entries[0]
print(f"splitting-matrix minimum eigenvalue: {entry.lam_min[0]:+.4f} "
      f"({'descent direction exists' if entry.lam_min[0] < 0 else 'no descent direction'})")

# continue both ways from the identical stall point; the copies start
# half a parameter-norm apart so the escape is quick enough to watch
plain_spec, plain_state = clone_spec(spec), clone_state(state)
plain = train(plain_spec, plain_state, steps=2000)

spec2, state2, event = grow_operator_split(spec, state, spec.edges[0].edge_id, report,
                                           MorphConfig(split_eta_scale=0.5),
                                           np.random.default_rng(0))
split = train(spec2, state2, steps=2000)

print(f"2000 more steps, plain: {plain:.6f}")
print(f"2000 more steps, split: {split:.6f}")
print(f"the split pair reaches {plain / split:.0f}x lower loss from the same stall")
