"""Growing a cell without changing what it computes.

Each growth transform comes in an exact flavor (new parameters arranged
so the cell's outputs are untouched) and a noisy flavor that breaks the
tie symmetrically so training can tell the new parts apart. The
discrepancy on a probe batch scales linearly with the noise, so the
exact case really is the noise -> 0 limit.
"""

import numpy as np

from cellgrow import MorphConfig, build_two_to_one, preservation_error
from cellgrow.morphism import grow_node_two_to_one, grow_operator_morph, probe_batch
from cellgrow.autodiff import Tensor
from cellgrow.morphism import invert_softmax

rng = np.random.default_rng(5)
spec, state = build_two_to_one(5, 4, 2, seed=3)
x, h = probe_batch(spec, rng)


def dominant(state, edge_id, k=5):
    # operator duplication only fires once one op clearly dominates its
    # mixture, so pin edge 0 to 80/5/5/5/5 before asking for it
    w = np.full(k, 0.2 / (k - 1))
    w[0] = 0.8
    state.alphas[edge_id] = Tensor(invert_softmax(w)[None, :], requires_grad=True)


print(f"start: {spec.node_count} nodes, probe batch {x.shape[0]} sequences")
print()
print(f"{'transform':<22} {'noise':>8} {'probe discrepancy':>20}")
for delta in (0.0, 1e-2, 1e-3, 1e-4):
    spec2, state2, event = grow_node_two_to_one(spec, state, MorphConfig(delta=delta),
                                                np.random.default_rng(7))
    err = preservation_error(spec, state, spec2, state2, x, h)
    print(f"{'grow node':<22} {delta:>8.0e} {err:>20.3e}")

dominant(state, spec.edges[0].edge_id)
for delta in (0.0, 1e-2, 1e-3, 1e-4):
    spec2, state2, event = grow_operator_morph(spec, state, spec.edges[0].edge_id,
                                               MorphConfig(delta=delta),
                                               np.random.default_rng(7))
    err = preservation_error(spec, state, spec2, state2, x, h)
    print(f"{'duplicate operator':<22} {delta:>8.0e} {err:>20.3e}")

print()
print("noise 0 rows are exactly 0.0: the grown cell is the same function")
