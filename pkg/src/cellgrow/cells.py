"""Cell architectures: the two searchable backbones plus baseline recurrent cells.

A cell is split into a CellSpec (structure: nodes, mixed edges, op instances,
parameter ids) and a ModelState (numbers: weight tensors keyed by parameter id,
architecture parameters keyed by edge id). Transforms build new specs; state
tensors are shared or copied explicitly, never mutated behind the spec's back.

Two backbones:

* two_to_one: a chain. Every node applies one mixed operation to the pair
  (x_t, previous node output); node 1 reads (x_t, h_prev). Op set: three
  gated activations, an additive path (W x_t + h, the near-identity used by
  the growth morphism) and a multiplicative path (W x_t * h). The last node
  output is h_t.

* darts: a DAG. Node 1 applies its mixed op to concat(x_t, h_prev); node k>1
  sums one mixed op per earlier node. Activations here are plain linear maps
  followed by the nonlinearity (no bias). The identity op needs square dims,
  so the concat edge carries {tanh, relu, sigmoid, zero} and node-to-node
  edges carry {tanh, relu, sigmoid, identity, zero}. Cell output is the mean
  of node outputs, or the last node under cell_output="last_node" (the rule
  the growth morphism preserves exactly).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    NumericError,
    Tensor,
    add,
    add_bias,
    concat_cols,
    hadamard,
    matmul,
    relu,
    scale,
    sigmoid,
    softmax,
    tanh,
    weighted_sum,
)

TT1_KINDS = ("tt1_sigmoid", "tt1_tanh", "tt1_relu", "tt1_sum", "tt1_prod")
DARTS_KINDS = ("darts_tanh", "darts_relu", "darts_sigmoid", "darts_identity", "darts_zero")
DARTS_INPUT_KINDS = ("darts_tanh", "darts_relu", "darts_sigmoid", "darts_zero")

# kinds whose hidden units have their own parameter column (split targets)
SPLITTABLE_KINDS = frozenset(
    {"tt1_sigmoid", "tt1_tanh", "tt1_relu", "darts_tanh", "darts_relu", "darts_sigmoid"}
)

_ACT = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}

INPUT_NODE = 0  # edge source sentinel: x_t/h_prev (concat for the darts backbone)


@dataclass
class OpInstance:
    kind: str
    params: dict[str, int] = field(default_factory=dict)  # slot name -> parameter id


@dataclass
class MixedEdge:
    edge_id: int
    source: int  # node id, or INPUT_NODE
    target: int  # node id
    ops: list[OpInstance]


@dataclass
class CellSpec:
    backbone: str  # "two_to_one" | "darts"
    n_x: int
    n_h: int
    nodes: list[int]  # node ids in evaluation order
    edges: list[MixedEdge]
    cell_output: str = "mean"  # darts only; two_to_one always emits the last node
    next_node_id: int = 1
    next_edge_id: int = 1
    next_param_id: int = 1

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def edges_into(self, node_id: int) -> list[MixedEdge]:
        return [e for e in self.edges if e.target == node_id]

    def edge_by_id(self, edge_id: int) -> MixedEdge:
        for e in self.edges:
            if e.edge_id == edge_id:
                return e
        raise KeyError(f"no edge {edge_id}")


@dataclass
class ModelState:
    weights: dict  # parameter id -> Tensor
    alphas: dict[int, Tensor]  # edge id -> (1, len(ops)) tensor
    seed: int = 0


@dataclass
class BaselineSpec:
    kind: str  # "rnn" | "gru" | "lstm"
    n_x: int
    n_h: int


def _init_matrix(rng: np.random.Generator, rows: int, cols: int, n_h: int) -> Tensor:
    # uniform(-1/sqrt(n_h), 1/sqrt(n_h)), the usual recurrent-cell choice
    bound = 1.0 / np.sqrt(n_h)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def op_param_shapes(kind: str, n_x: int, n_h: int, source: int) -> dict[str, tuple]:
    """Parameter slots and shapes for one op instance."""
    if kind in ("tt1_sigmoid", "tt1_tanh", "tt1_relu"):
        return {"w_x": (n_x, n_h), "w_h": (n_h, n_h), "b": (1, n_h)}
    if kind in ("tt1_sum", "tt1_prod"):
        return {"w_x": (n_x, n_h)}
    if kind in ("darts_tanh", "darts_relu", "darts_sigmoid"):
        in_dim = n_x + n_h if source == INPUT_NODE else n_h
        return {"w": (in_dim, n_h)}
    if kind in ("darts_identity", "darts_zero"):
        return {}
    raise ValueError(f"unknown op kind {kind!r}")


def new_op_instance(
    spec: CellSpec, state: ModelState, kind: str, source: int, rng: np.random.Generator
) -> OpInstance:
    """Allocate parameter ids and freshly initialized tensors for one op."""
    params = {}
    for slot, shape in op_param_shapes(kind, spec.n_x, spec.n_h, source).items():
        pid = spec.next_param_id
        spec.next_param_id += 1
        state.weights[pid] = _init_matrix(rng, shape[0], shape[1], spec.n_h)
        params[slot] = pid
    return OpInstance(kind, params)


def build_two_to_one(n_x: int, n_h: int, m: int, seed: int = 0) -> tuple[CellSpec, ModelState]:
    if m < 1:
        raise ValueError("node count must be >= 1")
    rng = np.random.default_rng(seed)
    spec = CellSpec("two_to_one", n_x, n_h, nodes=[], edges=[])
    state = ModelState(weights={}, alphas={}, seed=seed)
    prev = INPUT_NODE
    for _ in range(m):
        nid = spec.next_node_id
        spec.next_node_id += 1
        spec.nodes.append(nid)
        eid = spec.next_edge_id
        spec.next_edge_id += 1
        ops = [new_op_instance(spec, state, k, prev, rng) for k in TT1_KINDS]
        spec.edges.append(MixedEdge(eid, prev, nid, ops))
        state.alphas[eid] = Tensor(np.zeros((1, len(ops))), requires_grad=True)
        prev = nid
    return spec, state


def build_darts(
    n_x: int, n_h: int, m: int, seed: int = 0, cell_output: str = "mean"
) -> tuple[CellSpec, ModelState]:
    if m < 1:
        raise ValueError("node count must be >= 1")
    if cell_output not in ("mean", "last_node"):
        raise ValueError(f"unknown cell_output {cell_output!r}")
    rng = np.random.default_rng(seed)
    spec = CellSpec("darts", n_x, n_h, nodes=[], edges=[], cell_output=cell_output)
    state = ModelState(weights={}, alphas={}, seed=seed)
    for j in range(m):
        nid = spec.next_node_id
        spec.next_node_id += 1
        spec.nodes.append(nid)
        sources = [INPUT_NODE] if j == 0 else list(spec.nodes[:j])
        for src in sources:
            eid = spec.next_edge_id
            spec.next_edge_id += 1
            kinds = DARTS_INPUT_KINDS if src == INPUT_NODE else DARTS_KINDS
            ops = [new_op_instance(spec, state, k, src, rng) for k in kinds]
            spec.edges.append(MixedEdge(eid, src, nid, ops))
            state.alphas[eid] = Tensor(np.zeros((1, len(ops))), requires_grad=True)
    return spec, state


def _tt1_op_output(
    op: OpInstance, state: ModelState, x: Tensor, prev: Tensor, trace, edge_id: int, op_idx: int
) -> Tensor:
    w = state.weights
    if op.kind in ("tt1_sigmoid", "tt1_tanh", "tt1_relu"):
        pre = add_bias(
            add(matmul(x, w[op.params["w_x"]]), matmul(prev, w[op.params["w_h"]])),
            w[op.params["b"]],
        )
        out = _ACT[op.kind.split("_")[1]](pre)
        if trace is not None:
            u = np.concatenate([x.data, prev.data, np.ones((x.shape[0], 1))], axis=1)
            trace.setdefault((edge_id, op_idx), []).append((u, pre.data, out))
        return out
    if op.kind == "tt1_sum":
        return add(matmul(x, w[op.params["w_x"]]), prev)
    if op.kind == "tt1_prod":
        return hadamard(matmul(x, w[op.params["w_x"]]), prev)
    raise ValueError(f"op kind {op.kind!r} is not in the two_to_one set")


def _darts_op_output(
    op: OpInstance, state: ModelState, z: Tensor, n_h: int, trace, edge_id: int, op_idx: int
) -> Tensor:
    if op.kind in ("darts_tanh", "darts_relu", "darts_sigmoid"):
        pre = matmul(z, state.weights[op.params["w"]])
        out = _ACT[op.kind.split("_")[1]](pre)
        if trace is not None:
            trace.setdefault((edge_id, op_idx), []).append((z.data.copy(), pre.data, out))
        return out
    if op.kind == "darts_identity":
        if z.shape[1] != n_h:
            raise ValueError("identity op needs square dims; not valid on the input edge")
        return z
    if op.kind == "darts_zero":
        return Tensor(np.zeros((z.shape[0], n_h)))
    raise ValueError(f"op kind {op.kind!r} is not in the darts set")


def _mix_edge(edge: MixedEdge, state: ModelState, term_fn, trace) -> Tensor:
    weights = softmax(state.alphas[edge.edge_id])
    terms = [term_fn(op, i) for i, op in enumerate(edge.ops)]
    return weighted_sum(weights, terms)


def forward_two_to_one(
    spec: CellSpec, state: ModelState, x_t: Tensor, h_prev: Tensor, trace=None
) -> Tensor:
    """One step of the chain backbone; returns the last node's output."""
    _check_dims(spec, x_t, h_prev)
    outputs = {INPUT_NODE: h_prev}
    for nid in spec.nodes:
        edges = spec.edges_into(nid)
        if len(edges) != 1:
            raise ValueError(f"two_to_one node {nid} must have exactly one edge")
        edge = edges[0]
        prev = outputs[edge.source]
        try:
            outputs[nid] = _mix_edge(
                edge,
                state,
                lambda op, i: _tt1_op_output(op, state, x_t, prev, trace, edge.edge_id, i),
                trace,
            )
        except NumericError as err:
            raise NumericError(f"node {nid}: {err}") from err
    return outputs[spec.nodes[-1]]


def forward_darts(
    spec: CellSpec, state: ModelState, x_t: Tensor, h_prev: Tensor, trace=None
) -> Tensor:
    _check_dims(spec, x_t, h_prev)
    z_input = concat_cols(x_t, h_prev)
    outputs: dict[int, Tensor] = {}
    for nid in spec.nodes:
        contributions = []
        for edge in spec.edges_into(nid):
            z = z_input if edge.source == INPUT_NODE else outputs[edge.source]
            try:
                contributions.append(
                    _mix_edge(
                        edge,
                        state,
                        lambda op, i, z=z, e=edge: _darts_op_output(
                            op, state, z, spec.n_h, trace, e.edge_id, i
                        ),
                        trace,
                    )
                )
            except NumericError as err:
                raise NumericError(f"node {nid}: {err}") from err
        if not contributions:
            raise ValueError(f"darts node {nid} has no incoming edges")
        if len(contributions) == 1:
            outputs[nid] = contributions[0]
        else:
            ones = Tensor(np.ones((1, len(contributions))))
            outputs[nid] = weighted_sum(ones, contributions)
    node_outs = [outputs[nid] for nid in spec.nodes]
    if spec.cell_output == "last_node" or len(node_outs) == 1:
        return node_outs[-1]
    ones = Tensor(np.ones((1, len(node_outs))))
    return scale(weighted_sum(ones, node_outs), 1.0 / len(node_outs))


def cell_forward(spec, state: ModelState, x_t: Tensor, h_prev: Tensor, trace=None) -> Tensor:
    if spec.backbone == "two_to_one":
        return forward_two_to_one(spec, state, x_t, h_prev, trace)
    if spec.backbone == "darts":
        return forward_darts(spec, state, x_t, h_prev, trace)
    raise ValueError(f"unknown backbone {spec.backbone!r}")


def _check_dims(spec, x_t: Tensor, h_prev: Tensor):
    if x_t.shape[1] != spec.n_x:
        raise ValueError(f"x_t has {x_t.shape[1]} columns, cell expects {spec.n_x}")
    if h_prev.shape[1] != spec.n_h:
        raise ValueError(f"h_prev has {h_prev.shape[1]} columns, cell expects {spec.n_h}")
    if x_t.shape[0] != h_prev.shape[0]:
        raise ValueError("x_t and h_prev batch sizes differ")


# ---------------------------------------------------------------------------
# baseline cells


_BASELINE_GATES = {"rnn": [""], "gru": ["z", "r", "n"], "lstm": ["i", "f", "g", "o"]}


def build_baseline(kind: str, n_x: int, n_h: int, seed: int = 0) -> tuple[BaselineSpec, ModelState]:
    if kind not in _BASELINE_GATES:
        raise ValueError(f"unknown baseline kind {kind!r}")
    rng = np.random.default_rng(seed)
    weights = {}
    for gate in _BASELINE_GATES[kind]:
        suffix = f"_{gate}" if gate else ""
        weights[f"w_x{suffix}"] = _init_matrix(rng, n_x, n_h, n_h)
        weights[f"w_h{suffix}"] = _init_matrix(rng, n_h, n_h, n_h)
        weights[f"b{suffix}"] = Tensor(np.zeros((1, n_h)), requires_grad=True)
    return BaselineSpec(kind, n_x, n_h), ModelState(weights=weights, alphas={}, seed=seed)


def _gate(weights, gate: str, x: Tensor, h: Tensor, act) -> Tensor:
    suffix = f"_{gate}" if gate else ""
    pre = add_bias(
        add(matmul(x, weights[f"w_x{suffix}"]), matmul(h, weights[f"w_h{suffix}"])),
        weights[f"b{suffix}"],
    )
    return act(pre)


def forward_baseline(
    spec: BaselineSpec, state: ModelState, x_t: Tensor, h_prev: Tensor, c_prev: Tensor = None
):
    """Textbook cells. Returns h_t (rnn/gru) or (h_t, c_t) (lstm)."""
    w = state.weights
    if spec.kind == "rnn":
        return _gate(w, "", x_t, h_prev, tanh)
    if spec.kind == "gru":
        update = _gate(w, "z", x_t, h_prev, sigmoid)
        reset = _gate(w, "r", x_t, h_prev, sigmoid)
        # candidate uses the reset-gated state on the recurrent path
        pre = add_bias(
            add(matmul(x_t, w["w_x_n"]), matmul(hadamard(reset, h_prev), w["w_h_n"])),
            w["b_n"],
        )
        cand = tanh(pre)
        one = Tensor(np.ones((1, spec.n_h)))
        keep = add_bias(scale(update, -1.0), one)  # 1 - update
        return add(hadamard(keep, cand), hadamard(update, h_prev))
    if spec.kind == "lstm":
        if c_prev is None:
            raise ValueError("lstm forward needs c_prev")
        i = _gate(w, "i", x_t, h_prev, sigmoid)
        f = _gate(w, "f", x_t, h_prev, sigmoid)
        g = _gate(w, "g", x_t, h_prev, tanh)
        o = _gate(w, "o", x_t, h_prev, sigmoid)
        c_t = add(hadamard(f, c_prev), hadamard(i, g))
        return hadamard(o, tanh(c_t)), c_t
    raise ValueError(f"unknown baseline kind {spec.kind!r}")


def unroll(spec, state: ModelState, sequence: list[Tensor], h_0: Tensor) -> list[Tensor]:
    """Thread the hidden state through a sequence; gradients flow via the tape."""
    if not sequence:
        raise ValueError("unroll needs a nonempty sequence")
    hs = []
    h = h_0
    if isinstance(spec, BaselineSpec) and spec.kind == "lstm":
        c = Tensor(np.zeros(h_0.shape))
        for x_t in sequence:
            h, c = forward_baseline(spec, state, x_t, h, c)
            hs.append(h)
        return hs
    for x_t in sequence:
        if isinstance(spec, BaselineSpec):
            h = forward_baseline(spec, state, x_t, h)
        else:
            h = cell_forward(spec, state, x_t, h)
        hs.append(h)
    return hs


# ---------------------------------------------------------------------------
# serialization: one json file, float64 blobs as little-endian hex


FORMAT_VERSION = 1


def _array_to_hex(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "hex": a.tobytes().hex()}


def _array_from_hex(blob: dict) -> np.ndarray:
    arr = np.frombuffer(bytes.fromhex(blob["hex"]), dtype="<f8").copy()
    return arr.reshape(blob["shape"])


def cell_to_dict(spec: CellSpec, state: ModelState) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "backbone": spec.backbone,
        "n_x": spec.n_x,
        "n_h": spec.n_h,
        "cell_output": spec.cell_output,
        "nodes": list(spec.nodes),
        "next_node_id": spec.next_node_id,
        "next_edge_id": spec.next_edge_id,
        "next_param_id": spec.next_param_id,
        "edges": [
            {
                "edge_id": e.edge_id,
                "source": e.source,
                "target": e.target,
                "ops": [{"kind": op.kind, "params": op.params} for op in e.ops],
                "alpha": _array_to_hex(state.alphas[e.edge_id].data),
            }
            for e in spec.edges
        ],
        "weights": {str(pid): _array_to_hex(t.data) for pid, t in state.weights.items()},
        "seed": state.seed,
    }


def cell_from_dict(doc: dict) -> tuple[CellSpec, ModelState]:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {doc.get('format_version')!r}")
    spec = CellSpec(
        backbone=doc["backbone"],
        n_x=doc["n_x"],
        n_h=doc["n_h"],
        nodes=list(doc["nodes"]),
        edges=[],
        cell_output=doc.get("cell_output", "mean"),
        next_node_id=doc["next_node_id"],
        next_edge_id=doc["next_edge_id"],
        next_param_id=doc["next_param_id"],
    )
    state = ModelState(weights={}, alphas={}, seed=doc.get("seed", 0))
    for ed in doc["edges"]:
        ops = [
            OpInstance(o["kind"], {slot: int(pid) for slot, pid in o["params"].items()})
            for o in ed["ops"]
        ]
        spec.edges.append(MixedEdge(ed["edge_id"], ed["source"], ed["target"], ops))
        state.alphas[ed["edge_id"]] = Tensor(_array_from_hex(ed["alpha"]), requires_grad=True)
    for pid, blob in doc["weights"].items():
        state.weights[int(pid)] = Tensor(_array_from_hex(blob), requires_grad=True)
    return spec, state


def save_cell(path, spec: CellSpec, state: ModelState):
    with open(path, "w") as fh:
        json.dump(cell_to_dict(spec, state), fh, indent=1, sort_keys=True)


def load_cell(path) -> tuple[CellSpec, ModelState]:
    with open(path) as fh:
        return cell_from_dict(json.load(fh))
