"""Architecture transforms: node growth, operator growth and splitting, pruning.

Every transform is a pure function (spec, state, ..., rng) -> (spec', state',
event): inputs are never mutated, pre-existing tensors are copied bit-exactly,
and the returned GrowthEvent carries the noise actually drawn plus a measured
preservation error over a 64-sample probe batch.

Combination weights live in log space (softmax of per-edge alpha rows), so the
weight surgery here works through two inverses:

* invert_softmax fixes the gauge sum(exp(alpha)) = 1, i.e. alpha = ln(w), with
  exact zeros mapped to LOG_ZERO (whose softmax weight underflows to 0.0, so
  zero-weight ops contribute exactly nothing downstream).
* appending an op with target weight eps keeps existing alphas untouched and
  solves for the one new entry; pruning an entry renormalizes the survivors
  automatically because softmax only sees the remaining alphas.

The exact-morphism limits (delta = sigma = 0 growth, eta = 0 splits on fresh
integer-gauge alpha rows) leave probe outputs bit-identical, not merely close;
the non-exact mean-output caveat for the DAG backbone is recorded per event.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, mse, softmax
from .cells import (
    DARTS_INPUT_KINDS,
    DARTS_KINDS,
    INPUT_NODE,
    SPLITTABLE_KINDS,
    TT1_KINDS,
    CellSpec,
    MixedEdge,
    ModelState,
    OpInstance,
    cell_forward,
    new_op_instance,
)

LOG_ZERO = -1e6  # alpha whose softmax weight underflows to exactly 0.0
LN2 = float(np.log(2.0))
PROBE_SIZE = 64


class ConfigError(ValueError):
    """A configuration value violates its documented range."""


@dataclass
class MorphConfig:
    delta: float = 1e-3  # uniform-noise bound for new combination weights
    sigma: float = None  # gaussian std for new linear maps; defaults to delta
    op_grow_threshold: float = 0.75
    op_prune_threshold: float = 0.05
    split_strategy: str = "min_sum"  # or "simultaneous"
    keep_k: int = 1
    split_eta_scale: float = 1e-2  # split offset = scale * |theta_h|; 0 = exact copies

    def __post_init__(self):
        if self.sigma is None:
            self.sigma = self.delta
        # four eps draws share the unit budget, so delta must stay below 1/4
        if not 0.0 <= self.delta < 0.25:
            raise ConfigError(f"delta {self.delta} outside [0, 0.25)")
        if self.sigma < 0:
            raise ConfigError(f"sigma {self.sigma} must be >= 0")
        if not 0.0 < self.op_prune_threshold < self.op_grow_threshold < 1.0:
            raise ConfigError(
                "need 0 < op_prune_threshold < op_grow_threshold < 1, got "
                f"{self.op_prune_threshold} and {self.op_grow_threshold}"
            )
        if self.split_strategy not in ("min_sum", "simultaneous"):
            raise ConfigError(f"unknown split_strategy {self.split_strategy!r}")
        if self.keep_k < 1:
            raise ConfigError("keep_k must be >= 1")
        if self.split_eta_scale < 0:
            raise ConfigError("split_eta_scale must be >= 0")


@dataclass
class GrowthEvent:
    kind: str  # grow_node | grow_op_morph | grow_op_split | prune_op |
    #            replace_op | resample_op | prune_stage
    targets: dict
    noise: dict = field(default_factory=dict)
    preservation_error: float = None  # None for transforms that do not preserve
    notes: str = ""


def _py(value):
    if isinstance(value, dict):
        return {str(k): _py(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_py(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_py(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def event_to_dict(event: GrowthEvent) -> dict:
    return {
        "kind": event.kind,
        "targets": _py(event.targets),
        "noise": _py(event.noise),
        "preservation_error": _py(event.preservation_error),
        "notes": event.notes,
    }


def events_to_jsonl(events) -> str:
    lines = []
    for ev in events:
        doc = ev if isinstance(ev, dict) else event_to_dict(ev)
        lines.append(json.dumps(doc, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# cloning and weight-space helpers


def clone_spec(spec: CellSpec) -> CellSpec:
    return CellSpec(
        backbone=spec.backbone,
        n_x=spec.n_x,
        n_h=spec.n_h,
        nodes=list(spec.nodes),
        edges=[
            MixedEdge(
                e.edge_id, e.source, e.target, [OpInstance(o.kind, dict(o.params)) for o in e.ops]
            )
            for e in spec.edges
        ],
        cell_output=spec.cell_output,
        next_node_id=spec.next_node_id,
        next_edge_id=spec.next_edge_id,
        next_param_id=spec.next_param_id,
    )


def clone_state(state: ModelState) -> ModelState:
    return ModelState(
        weights={pid: Tensor(t.data.copy(), requires_grad=True) for pid, t in state.weights.items()},
        alphas={eid: Tensor(t.data.copy(), requires_grad=True) for eid, t in state.alphas.items()},
        seed=state.seed,
    )


def invert_softmax(weights) -> np.ndarray:
    """Alpha row for a simplex weight vector, gauge sum(exp(alpha)) = 1."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"not a simplex vector: {w}")
    alpha = np.full(w.shape, LOG_ZERO)
    pos = w > 0
    alpha[pos] = np.log(w[pos])
    return alpha


def edge_weights(state: ModelState, edge: MixedEdge) -> np.ndarray:
    """Combination weights of one edge, computed exactly as the forward pass."""
    return softmax(state.alphas[edge.edge_id]).data[0]


def _log_total(alpha: np.ndarray) -> float:
    m = alpha.max()
    return float(m + np.log(np.exp(alpha - m).sum()))


def _append_alpha(state: ModelState, edge_id: int, eps: float):
    """Extend an alpha row so the new op gets weight eps and the rest scale by 1-eps."""
    row = state.alphas[edge_id].data[0]
    if eps == 0.0:
        entry = LOG_ZERO
    else:
        entry = _log_total(row) + np.log(eps) - np.log1p(-eps)
    state.alphas[edge_id] = Tensor(
        np.concatenate([row, [entry]])[None, :], requires_grad=True
    )


def _set_alpha(state: ModelState, edge_id: int, row: np.ndarray):
    state.alphas[edge_id] = Tensor(np.asarray(row, dtype=np.float64)[None, :], requires_grad=True)


def _drop_op(spec: CellSpec, state: ModelState, edge: MixedEdge, index: int):
    removed = edge.ops.pop(index)
    for pid in removed.params.values():
        del state.weights[pid]
    row = state.alphas[edge.edge_id].data[0]
    _set_alpha(state, edge.edge_id, np.delete(row, index))
    return removed


def probe_batch(spec: CellSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    x = rng.standard_normal((PROBE_SIZE, spec.n_x))
    h = rng.standard_normal((PROBE_SIZE, spec.n_h))
    return x, h


def preservation_error(spec_a, state_a, spec_b, state_b, x, h, output_rule=None) -> float:
    """Max |output difference| of two cells over a shared probe batch."""
    outs = []
    for spec, state in ((spec_a, state_a), (spec_b, state_b)):
        saved = spec.cell_output
        if output_rule is not None:
            spec.cell_output = output_rule
        try:
            outs.append(cell_forward(spec, state, Tensor(x), Tensor(h)).data)
        finally:
            spec.cell_output = saved
    return float(np.max(np.abs(outs[0] - outs[1])))


# ---------------------------------------------------------------------------
# node growth


def grow_node_two_to_one(spec, state, cfg: MorphConfig, rng):
    """Append a chain node whose mixture starts as a near-identity additive map."""
    if spec.backbone != "two_to_one":
        raise ValueError("grow_node_two_to_one needs a two_to_one spec")
    new_spec, new_state = clone_spec(spec), clone_state(state)

    # weight budget: eps to sigmoid/tanh/relu/prod, the remainder to the sum op
    eps = rng.uniform(0.0, cfg.delta, size=4)
    w = np.array([eps[0], eps[1], eps[2], 1.0 - eps.sum(), eps[3]])

    source = new_spec.nodes[-1]
    nid = new_spec.next_node_id
    new_spec.next_node_id += 1
    new_spec.nodes.append(nid)
    eid = new_spec.next_edge_id
    new_spec.next_edge_id += 1
    ops = [new_op_instance(new_spec, new_state, k, source, rng) for k in TT1_KINDS]
    # the additive path starts near h -> h: its input map is ~0, not standard init
    sum_pid = ops[3].params["w_x"]
    new_state.weights[sum_pid] = Tensor(
        rng.normal(0.0, cfg.sigma, size=(spec.n_x, spec.n_h)), requires_grad=True
    )
    new_spec.edges.append(MixedEdge(eid, source, nid, ops))
    _set_alpha(new_state, eid, invert_softmax(w))

    px, ph = probe_batch(spec, rng)
    err = preservation_error(spec, state, new_spec, new_state, px, ph)
    event = GrowthEvent(
        kind="grow_node",
        targets={"node": nid, "edges": [{"edge": eid, "source": source, "kinds": list(TT1_KINDS)}]},
        noise={"eps": eps.tolist(), "anchor_weight": float(w[3]), "sigma": cfg.sigma},
        preservation_error=err,
    )
    return new_spec, new_state, event


def grow_node_darts(spec, state, cfg: MorphConfig, rng):
    """Append a DAG node: near-identity edge from the last node, near-zero from the rest."""
    if spec.backbone != "darts":
        raise ValueError("grow_node_darts needs a darts spec")
    new_spec, new_state = clone_spec(spec), clone_state(state)

    last = new_spec.nodes[-1]
    nid = new_spec.next_node_id
    new_spec.next_node_id += 1
    edge_descs = []
    noise_eps = {}
    id_idx = DARTS_KINDS.index("darts_identity")
    zero_idx = DARTS_KINDS.index("darts_zero")
    for source in list(new_spec.nodes):
        eid = new_spec.next_edge_id
        new_spec.next_edge_id += 1
        eps = rng.uniform(0.0, cfg.delta, size=4)
        anchor = id_idx if source == last else zero_idx
        w = np.empty(5)
        others = [i for i in range(5) if i != anchor]
        w[others] = eps
        w[anchor] = 1.0 - eps.sum()
        ops = [new_op_instance(new_spec, new_state, k, source, rng) for k in DARTS_KINDS]
        new_spec.edges.append(MixedEdge(eid, source, nid, ops))
        _set_alpha(new_state, eid, invert_softmax(w))
        edge_descs.append({"edge": eid, "source": source, "kinds": list(DARTS_KINDS)})
        noise_eps[str(eid)] = eps.tolist()
    new_spec.nodes.append(nid)

    px, ph = probe_batch(spec, rng)
    err = preservation_error(spec, state, new_spec, new_state, px, ph, output_rule="last_node")
    notes = ""
    if spec.cell_output == "mean":
        notes = (
            "mean output rule divides by the node count, so growth is not exact "
            "under it; preservation measured under last_node"
        )
    event = GrowthEvent(
        kind="grow_node",
        targets={"node": nid, "edges": edge_descs},
        noise={"eps": noise_eps, "sigma": cfg.sigma},
        preservation_error=err,
        notes=notes,
    )
    return new_spec, new_state, event


def grow_node(spec, state, cfg: MorphConfig, rng):
    if spec.backbone == "two_to_one":
        return grow_node_two_to_one(spec, state, cfg, rng)
    return grow_node_darts(spec, state, cfg, rng)


# ---------------------------------------------------------------------------
# operator growth


def grow_operator_morph(spec, state, edge_id: int, cfg: MorphConfig, rng):
    """Duplicate the dominant op with fresh parameters and a tiny starting weight."""
    edge = spec.edge_by_id(edge_id)
    w = edge_weights(state, edge)
    top = int(np.argmax(w))
    if w[top] < cfg.op_grow_threshold:
        raise ValueError(
            f"edge {edge_id}: max weight {w[top]:.4f} below grow threshold "
            f"{cfg.op_grow_threshold}"
        )
    new_spec, new_state = clone_spec(spec), clone_state(state)
    new_edge = new_spec.edge_by_id(edge_id)
    eps = float(rng.uniform(0.0, cfg.delta))
    kind = new_edge.ops[top].kind
    new_edge.ops.append(new_op_instance(new_spec, new_state, kind, new_edge.source, rng))
    _append_alpha(new_state, edge_id, eps)

    px, ph = probe_batch(spec, rng)
    err = preservation_error(spec, state, new_spec, new_state, px, ph)
    event = GrowthEvent(
        kind="grow_op_morph",
        targets={"edge": edge_id, "op_index": len(new_edge.ops) - 1, "kind": kind,
                 "duplicated_index": top},
        noise={"eps": eps},
        preservation_error=err,
    )
    return new_spec, new_state, event


# ---------------------------------------------------------------------------
# steepest-descent splitting


@dataclass
class OpSplitInfo:
    edge_id: int
    op_index: int
    kind: str
    matrices: np.ndarray  # (n_h, p, p) splitting matrix per hidden unit
    lam_min: np.ndarray  # (n_h,)
    v_min: np.ndarray  # (n_h, p), unit-norm rows
    degenerate: bool = False  # relu: curvature vanishes almost everywhere

    @property
    def neg_count(self) -> int:
        return int((self.lam_min < 0).sum())

    @property
    def lam_sum(self) -> float:
        return float(self.lam_min.sum())


@dataclass
class SplitReport:
    entries: list

    def negative_entries(self):
        return [e for e in self.entries if not e.degenerate and e.neg_count > 0]


@dataclass
class LossContext:
    """Probe batch plus the loss to differentiate for splitting decisions."""

    x: np.ndarray
    h_prev: np.ndarray
    target: np.ndarray = None
    loss_fn: object = None  # callable(h_t) -> scalar Tensor; default mse vs target

    def loss(self, h_t):
        if self.loss_fn is not None:
            return self.loss_fn(h_t)
        return mse(h_t, Tensor(self.target))


def _second_derivative(kind: str, out: np.ndarray) -> np.ndarray:
    if kind.endswith("sigmoid"):
        return out * (1.0 - out) * (1.0 - 2.0 * out)
    if kind.endswith("tanh"):
        return -2.0 * out * (1.0 - out * out)
    if kind.endswith("relu"):
        return np.zeros_like(out)
    raise ValueError(f"no curvature formula for {kind!r}")


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-10, max_sweeps: int = 60):
    """Cyclic Jacobi diagonalization of a symmetric matrix.

    Returns (eigenvalues, eigenvectors-as-columns), unsorted. Accurate to
    off-diagonal mass <= tol * frobenius_norm, plenty for sign decisions.
    """
    a = np.asarray(matrix, dtype=np.float64).copy()
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("jacobi_eigh needs a square matrix")
    if not np.allclose(a, a.T, atol=1e-9, rtol=0.0):
        raise ValueError("jacobi_eigh needs a symmetric matrix")
    v = np.eye(n)
    scale = max(1.0, float(np.sqrt((a * a).sum())))
    for _ in range(max_sweeps):
        # summed over the strict upper triangle: no cancellation near convergence
        off = np.sqrt(2.0 * (np.triu(a, 1) ** 2).sum())
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                # rotation angle that annihilates a[p, q] (stable small root)
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0:
                    t = 1.0 / (tau + np.hypot(1.0, tau))
                else:
                    t = 1.0 / (tau - np.hypot(1.0, tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                jt = np.array([[c, -s], [s, c]])
                a[[p, q], :] = jt @ a[[p, q], :]
                a[:, [p, q]] = a[:, [p, q]] @ jt.T
                v[:, [p, q]] = v[:, [p, q]] @ jt.T
    return np.diag(a).copy(), v


def split_report(spec, state, edge: MixedEdge, ctx: LossContext) -> SplitReport:
    """Per-unit splitting matrices and minimum eigenpairs for one edge's ops.

    For an activation unit out = phi(theta . u), the matrix for that unit is
    sum_b dL/dout[b] * phi''(z[b]) * u_b u_b^T over the probe batch, i.e. the
    part of the loss Hessian that an infinitesimal split can exploit: a
    negative minimum eigenvalue means two offset copies beat the original.
    """
    trace = {}
    with Tape() as tape:
        h_t = cell_forward(spec, state, Tensor(ctx.x), Tensor(ctx.h_prev), trace=trace)
        grads = tape.backward(ctx.loss(h_t))
    entries = []
    for idx, op in enumerate(edge.ops):
        if op.kind not in SPLITTABLE_KINDS:
            continue
        recs = trace.get((edge.edge_id, idx))
        if recs is None or len(recs) != 1:
            raise ValueError("split_report expects a single-step probe forward")
        u, _, out = recs[0]
        g = grads.get(out.tid)
        if g is None:
            g = np.zeros(out.shape)
        curvature = _second_derivative(op.kind, out.data)
        weighted = g * curvature  # (B, n_h)
        matrices = np.einsum("bh,bi,bj->hij", weighted, u, u)
        n_h = matrices.shape[0]
        p = matrices.shape[1]
        lam = np.zeros(n_h)
        vecs = np.zeros((n_h, p))
        degenerate = op.kind.endswith("relu")
        for h in range(n_h):
            if degenerate:
                vecs[h, 0] = 1.0
                continue
            evals, evecs = jacobi_eigh(matrices[h])
            k = int(np.argmin(evals))
            lam[h] = evals[k]
            vecs[h] = evecs[:, k]
        entries.append(
            OpSplitInfo(edge.edge_id, idx, op.kind, matrices, lam, vecs, degenerate)
        )
    return SplitReport(entries)


def _slot_order(kind: str) -> list[str]:
    # must match the stacking order of the traced input u
    return ["w_x", "w_h", "b"] if kind.startswith("tt1_") else ["w"]


def _unit_column(state, op: OpInstance, h: int) -> np.ndarray:
    """Hidden unit h's stacked parameter column, ordered like the traced input."""
    return np.concatenate(
        [state.weights[op.params[slot]].data[:, h] for slot in _slot_order(op.kind)]
    )


def _offset_op_params(spec, state, op: OpInstance, info: OpSplitInfo, sign: float, scale: float):
    """New parameter ids holding theta_h + sign * eta_h * v_h per negative unit."""
    new_params = {}
    for slot in _slot_order(op.kind):
        src = state.weights[op.params[slot]].data.copy()
        new_pid = spec.next_param_id
        spec.next_param_id += 1
        state.weights[new_pid] = Tensor(src, requires_grad=True)
        new_params[slot] = new_pid
    copy = OpInstance(op.kind, new_params)
    for h in range(info.lam_min.shape[0]):
        if info.lam_min[h] >= 0:
            continue
        eta = scale * float(np.linalg.norm(_unit_column(state, copy, h)))
        offset = sign * eta * info.v_min[h]
        pos = 0
        for slot in _slot_order(op.kind):
            arr = state.weights[new_params[slot]].data
            rows = arr.shape[0]
            arr[:, h] += offset[pos : pos + rows]
            pos += rows
    return copy


def grow_operator_split(spec, state, edge_id: int, report: SplitReport, cfg: MorphConfig, rng):
    """Replace splitting-unstable ops by two offset half-weight copies."""
    negatives = [e for e in report.negative_entries() if e.edge_id == edge_id]
    if not negatives:
        raise ValueError(f"edge {edge_id}: no operation with a negative minimum eigenvalue")
    if cfg.split_strategy == "min_sum":
        selected = [min(negatives, key=lambda e: e.lam_sum)]
    else:
        selected = negatives

    new_spec, new_state = clone_spec(spec), clone_state(state)
    new_edge = new_spec.edge_by_id(edge_id)
    split_descs = []
    # descending index order keeps earlier op indices valid while we splice
    for info in sorted(selected, key=lambda e: -e.op_index):
        op = new_edge.ops[info.op_index]
        left = _offset_op_params(new_spec, new_state, op, info, -1.0, cfg.split_eta_scale)
        right = _offset_op_params(new_spec, new_state, op, info, +1.0, cfg.split_eta_scale)
        for pid in op.params.values():
            del new_state.weights[pid]
        new_edge.ops[info.op_index : info.op_index + 1] = [left, right]
        row = new_state.alphas[edge_id].data[0]
        half = row[info.op_index] - LN2
        _set_alpha(
            new_state,
            edge_id,
            np.concatenate([row[: info.op_index], [half, half], row[info.op_index + 1 :]]),
        )
        split_descs.append(
            {"op_index": info.op_index, "kind": info.kind, "units_offset": info.neg_count}
        )

    px, ph = probe_batch(spec, rng)
    err = preservation_error(spec, state, new_spec, new_state, px, ph)
    event = GrowthEvent(
        kind="grow_op_split",
        targets={"edge": edge_id, "splits": split_descs, "strategy": cfg.split_strategy},
        noise={"eta_scale": cfg.split_eta_scale},
        preservation_error=err,
    )
    return new_spec, new_state, event


# ---------------------------------------------------------------------------
# pruning, replacing, resampling


def prune_operator_dynamic(spec, state, edge_id: int, cfg: MorphConfig, rng=None):
    """Remove the weakest op when it falls below threshold and no op dominates.

    Returns the inputs unchanged (event None) when the preconditions do not
    hold; dropping an alpha entry renormalizes the remaining weights exactly.
    """
    edge = spec.edge_by_id(edge_id)
    w = edge_weights(state, edge)
    if len(edge.ops) < 2 or w.max() >= cfg.op_grow_threshold or w.min() >= cfg.op_prune_threshold:
        return spec, state, None
    victim = int(np.argmin(w))
    new_spec, new_state = clone_spec(spec), clone_state(state)
    removed = _drop_op(new_spec, new_state, new_spec.edge_by_id(edge_id), victim)
    event = GrowthEvent(
        kind="prune_op",
        targets={"edge": edge_id, "op_index": victim, "kind": removed.kind},
        noise={"weight": float(w[victim])},
    )
    return new_spec, new_state, event


def kept_op_indices(spec: CellSpec, state: ModelState, cfg: MorphConfig) -> dict:
    """Op indices each edge would keep at stage pruning: top-keep_k by weight.

    Ties keep the lowest index. Also the payload for a prune_stage event.
    """
    kept = {}
    for edge in spec.edges:
        if len(edge.ops) <= cfg.keep_k:
            kept[edge.edge_id] = list(range(len(edge.ops)))
            continue
        w = edge_weights(state, edge)
        ranked = sorted(range(len(w)), key=lambda i: (-w[i], i))
        kept[edge.edge_id] = sorted(ranked[: cfg.keep_k])
    return kept


def prune_stage(spec, state, cfg: MorphConfig):
    """Keep each edge's top-keep_k ops by weight; ties keep the lowest index."""
    kept = kept_op_indices(spec, state, cfg)
    new_spec, new_state = clone_spec(spec), clone_state(state)
    for edge in new_spec.edges:
        keep = kept[edge.edge_id]
        for victim in range(len(edge.ops) - 1, -1, -1):
            if victim not in keep:
                _drop_op(new_spec, new_state, edge, victim)
    return new_spec, new_state


def replace_operator(spec, state, edge_id: int, cfg: MorphConfig, rng):
    """Swap the weakest op for a fresh instance of the strongest op's kind."""
    edge = spec.edge_by_id(edge_id)
    if len(edge.ops) < 2:
        raise ValueError(f"edge {edge_id}: replace needs at least two ops")
    w = edge_weights(state, edge)
    weakest = int(np.argmin(w))
    strongest = int(np.argmax(w))
    new_spec, new_state = clone_spec(spec), clone_state(state)
    new_edge = new_spec.edge_by_id(edge_id)
    old = new_edge.ops[weakest]
    for pid in old.params.values():
        del new_state.weights[pid]
    fresh = new_op_instance(new_spec, new_state, new_edge.ops[strongest].kind, new_edge.source, rng)
    new_edge.ops[weakest] = fresh
    event = GrowthEvent(
        kind="replace_op",
        targets={
            "edge": edge_id,
            "op_index": weakest,
            "old_kind": old.kind,
            "new_kind": fresh.kind,
        },
        noise={"inherited_weight": float(w[weakest])},
    )
    return new_spec, new_state, event


def op_kind_pool(spec: CellSpec, edge: MixedEdge) -> tuple:
    if spec.backbone == "two_to_one":
        return TT1_KINDS
    return DARTS_INPUT_KINDS if edge.source == INPUT_NODE else DARTS_KINDS


def resample_operator(spec, state, edge_id: int, cfg: MorphConfig, rng):
    """Exploratory restart: redraw every op kind on the edge, weights uniform."""
    edge = spec.edge_by_id(edge_id)
    if len(edge.ops) < 2:
        raise ValueError(f"edge {edge_id}: resample needs at least two ops")
    pool = op_kind_pool(spec, edge)
    draws = rng.integers(0, len(pool), size=len(edge.ops))
    kinds = [pool[i] for i in draws]
    new_spec, new_state = clone_spec(spec), clone_state(state)
    new_edge = new_spec.edge_by_id(edge_id)
    for op in new_edge.ops:
        for pid in op.params.values():
            del new_state.weights[pid]
    new_edge.ops = [new_op_instance(new_spec, new_state, k, new_edge.source, rng) for k in kinds]
    _set_alpha(new_state, edge_id, np.zeros(len(kinds)))
    event = GrowthEvent(
        kind="resample_op",
        targets={"edge": edge_id, "kinds": kinds},
        noise={"draws": draws.tolist()},
    )
    return new_spec, new_state, event


# ---------------------------------------------------------------------------
# trigger criteria


def plateaued(history, patience: int) -> bool:
    """True when the best value is at least `patience` entries old."""
    if patience < 1 or len(history) <= patience:
        return False
    best = int(np.argmin(history))
    return (len(history) - 1 - best) >= patience


def max_op_weight(spec, state) -> tuple:
    """(edge_id, weight) of the strongest op anywhere, (None, 0.0) if no edges."""
    best = (None, 0.0)
    for edge in spec.edges:
        w = float(edge_weights(state, edge).max())
        if best[0] is None or w > best[1]:
            best = (edge.edge_id, w)
    return best


def find_prune_candidate(spec, state, cfg: MorphConfig):
    """First edge satisfying the dynamic-prune precondition, else None."""
    for edge in spec.edges:
        if len(edge.ops) < 2:
            continue
        w = edge_weights(state, edge)
        if w.min() < cfg.op_prune_threshold and w.max() < cfg.op_grow_threshold:
            return edge.edge_id
    return None


def criteria_check(
    history,
    cfg: MorphConfig,
    *,
    node_patience: int,
    op_patience: int = None,
    stage_eval: float = None,
    best_eval: float = None,
    max_edge_weight: float = None,
    prune_candidate: bool = False,
    split_negative: bool = False,
) -> str:
    """One decision per trigger point; precedence stop > grow_node > prune > grow/split."""
    if not history:
        raise ValueError("criteria_check needs a nonempty loss history")
    if stage_eval is not None and best_eval is not None and stage_eval >= best_eval:
        return "stop"
    if plateaued(history, node_patience):
        return "grow_node"
    if prune_candidate:
        return "prune_op"
    if max_edge_weight is not None and max_edge_weight >= cfg.op_grow_threshold:
        return "grow_op"
    if plateaued(history, op_patience if op_patience is not None else node_patience):
        if split_negative:
            return "split_op"
    return "continue"


# ---------------------------------------------------------------------------
# structural replay


def structural_signature(spec: CellSpec) -> list:
    return [(e.source, e.target, tuple(op.kind for op in e.ops)) for e in spec.edges]


def replay_events(spec0: CellSpec, events) -> list:
    """Reconstruct the final structural signature from an event log alone."""
    edges = {
        e.edge_id: [e.source, e.target, [op.kind for op in e.ops]] for e in spec0.edges
    }
    order = [e.edge_id for e in spec0.edges]
    for ev in events:
        doc = ev if isinstance(ev, dict) else event_to_dict(ev)
        kind, t = doc["kind"], doc["targets"]
        if kind == "grow_node":
            for ed in t["edges"]:
                eid = int(ed["edge"])
                edges[eid] = [int(ed["source"]), int(t["node"]), list(ed["kinds"])]
                order.append(eid)
        elif kind == "grow_op_morph":
            edges[int(t["edge"])][2].append(t["kind"])
        elif kind == "grow_op_split":
            kinds = edges[int(t["edge"])][2]
            for sp in sorted(t["splits"], key=lambda s: -int(s["op_index"])):
                i = int(sp["op_index"])
                kinds[i : i + 1] = [kinds[i], kinds[i]]
        elif kind == "prune_op":
            del edges[int(t["edge"])][2][int(t["op_index"])]
        elif kind == "replace_op":
            edges[int(t["edge"])][2][int(t["op_index"])] = t["new_kind"]
        elif kind == "resample_op":
            edges[int(t["edge"])][2] = list(t["kinds"])
        elif kind == "prune_stage":
            for eid, keep in t["kept"].items():
                kinds = edges[int(eid)][2]
                edges[int(eid)][2] = [kinds[i] for i in sorted(int(j) for j in keep)]
        else:
            raise ValueError(f"unknown event kind {kind!r}")
    return [(edges[eid][0], edges[eid][1], tuple(edges[eid][2])) for eid in order]
