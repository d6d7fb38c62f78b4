"""Recurrent cells as editable specs.

A cell is a small dataflow graph: nodes combine two inputs through a
softmax-weighted mixture of candidate operators, and the architecture
weights of that mixture are ordinary trainable parameters. This script
builds the two backbones, runs them over a sequence, and reconciles the
live parameter inventory with the closed-form count.
"""

import numpy as np

from cellgrow import (
    CountSpec,
    build_baseline,
    build_darts,
    build_two_to_one,
    count_params,
    inventory,
    unroll,
)
from cellgrow.autodiff import Tensor

rng = np.random.default_rng(1)
n_x, n_h = 5, 4
xs = [Tensor(rng.standard_normal((6, n_x))) for _ in range(7)]
h0 = Tensor(np.zeros((6, n_h)))

for kind, build in (("two_to_one", build_two_to_one), ("darts", build_darts)):
    spec, state = build(n_x, n_h, 3, seed=0)
    hs = unroll(spec, state, xs, h0)
    live = inventory(spec, state)
    closed = count_params(CountSpec(kind, (n_x, n_h), m=3, alpha_per_edge=True))
    print(f"{kind:<10} nodes={spec.node_count} edges={len(spec.edges)} "
          f"h_t shape={hs[-1].data.shape} params={live} (closed form {closed})")

# classic baselines share the same unroll harness; they have no mixture
# edges, so the raw parameter count stands in for the inventory
from cellgrow.analysis import live_param_count

for kind in ("lstm", "gru"):
    spec, state = build_baseline(kind, n_x, n_h, seed=0)
    hs = unroll(spec, state, xs, h0)
    print(f"{kind:<10} params={live_param_count(state)} final h mean={hs[-1].data.mean():+.4f}")

# the reference table: every backbone at the two study sizes
print()
from cellgrow.cli import main

main(["count"])
