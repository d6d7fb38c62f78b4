"""Closed-form parameter counts, live-model inventory, complexity, metric export.

The published closed forms count 5 combination weights per node and omit the
baseline bias terms; live models carry per-edge combination weights and real
biases. count_params therefore exposes two convention flags, default False,
so the default reproduces the published table and the flagged variants match
what a live model actually holds:

* bias_included: add the +n_h bias term to rnn/gru/lstm counts.
* alpha_per_edge: count combination weights per edge (the live structure)
  instead of 5 per node. Only the darts backbone differs: its concat edge has
  4 ops (no identity there) and node k has k-1 edges, so the per-edge count
  is 4 + 5*m(m-1)/2. The chain backbone has one 5-op edge per node either way.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

from .cells import CellSpec, ModelState

GATES = {"rnn": 1, "gru": 3, "lstm": 4}

BACKBONES = ("darts", "two_to_one")


class IntegrityError(RuntimeError):
    """Spec and state disagree: orphan or missing parameter/alpha ids."""


@dataclass
class CountSpec:
    kind: str  # rnn | gru | lstm | darts | two_to_one
    sizes: tuple  # (n_x, n_h); baselines may give a longer layer chain n1..nL
    m: int = 1  # node count, backbones only
    bias_included: bool = False
    alpha_per_edge: bool = False

    def __post_init__(self):
        if self.kind not in GATES and self.kind not in BACKBONES:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise ValueError("sizes must be >= 1 and name at least input and hidden")
        if self.m < 1:
            raise ValueError("node count must be >= 1")


def count_params(spec: CountSpec) -> int:
    sizes = spec.sizes
    if spec.kind in GATES:
        g = GATES[spec.kind]
        total = 0
        for n_in, n_out in zip(sizes, sizes[1:]):
            total += n_out * (n_out + n_in)
            if spec.bias_included:
                total += n_out
        return g * total

    n_x, n_h = sizes[0], sizes[1]
    m = spec.m
    if spec.kind == "darts":
        weights = 3 * (n_x + n_h) * n_h + sum(3 * (k - 1) * n_h * n_h for k in range(2, m + 1))
        alphas = 4 + 5 * m * (m - 1) // 2 if spec.alpha_per_edge else 5 * m
        return weights + alphas
    # two_to_one: three biased activations, two bias-free linear paths, per node
    per_node = 3 * (n_x * n_h + n_h * n_h + n_h) + 2 * n_x * n_h
    return m * per_node + 5 * m


def inventory(spec: CellSpec, state: ModelState) -> int:
    """Element count over a live cell, verifying spec/state id integrity."""
    referenced = set()
    for edge in spec.edges:
        if edge.edge_id not in state.alphas:
            raise IntegrityError(f"edge {edge.edge_id} has no alpha vector")
        alpha = state.alphas[edge.edge_id]
        if alpha.shape != (1, len(edge.ops)):
            raise IntegrityError(
                f"edge {edge.edge_id}: alpha shape {alpha.shape} for {len(edge.ops)} ops"
            )
        for op in edge.ops:
            for pid in op.params.values():
                if pid not in state.weights:
                    raise IntegrityError(f"parameter {pid} referenced but missing")
                if pid in referenced:
                    raise IntegrityError(f"parameter {pid} referenced twice")
                referenced.add(pid)
    orphans = set(state.weights) - referenced
    if orphans:
        raise IntegrityError(f"unreferenced parameters: {sorted(orphans)}")
    alpha_orphans = set(state.alphas) - {e.edge_id for e in spec.edges}
    if alpha_orphans:
        raise IntegrityError(f"alphas without edges: {sorted(alpha_orphans)}")
    total = sum(state.weights[pid].data.size for pid in referenced)
    total += sum(a.data.size for a in state.alphas.values())
    return total


def live_param_count(state) -> int:
    """Raw element count of a model state; works for baselines too."""
    total = sum(t.data.size for t in state.weights.values())
    return total + sum(t.data.size for t in state.alphas.values())


def complexity_estimate(
    schedule: list[tuple[int, int]], kind: str, sizes: tuple, **flags
) -> int:
    """Parameter-epoch cost of a growth schedule: sum of count(m_i) * e_i."""
    if not schedule:
        raise ValueError("schedule must be nonempty")
    total = 0
    for m, epochs in schedule:
        if epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        total += count_params(CountSpec(kind, sizes, m=m, **flags)) * epochs
    return total


# ---------------------------------------------------------------------------
# metric records and export


@dataclass
class MetricRecord:
    trial: int
    backbone: str
    mode: str
    stage: int
    epoch: int
    wall_clock_s: float
    train_loss: float
    val_loss: float
    test_loss: float | None = None
    node_count: int = 0
    param_count: int = 0
    event: str = ""


METRIC_COLUMNS = [
    "trial",
    "backbone",
    "mode",
    "stage",
    "epoch",
    "train_loss",
    "val_loss",
    "test_loss",
    "node_count",
    "param_count",
    "event",
]

AGGREGATE_COLUMNS = [
    "backbone",
    "mode",
    "stage",
    "epoch",
    "trials",
    "train_loss_mean",
    "train_loss_stderr",
    "val_loss_mean",
    "val_loss_stderr",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def mean_stderr(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def export_metrics(records: list[MetricRecord], out_dir: str) -> dict[str, str]:
    """Write metrics.csv, timings.csv and aggregate.csv; returns the paths.

    Wall clock lives in its own file so the metric and event files stay
    byte-identical across reruns of the same seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "timings": os.path.join(out_dir, "timings.csv"),
        "aggregate": os.path.join(out_dir, "aggregate.csv"),
    }
    with open(paths["metrics"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in records:
            writer.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])
    with open(paths["timings"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "stage", "epoch", "wall_clock_s"])
        for r in records:
            writer.writerow([r.trial, r.stage, r.epoch, _fmt(r.wall_clock_s)])

    groups: dict[tuple, dict[int, MetricRecord]] = {}
    for r in records:
        groups.setdefault((r.backbone, r.mode, r.stage, r.epoch), {})[r.trial] = r
    with open(paths["aggregate"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_COLUMNS)
        for key in sorted(groups):
            per_trial = groups[key]
            train_mean, train_se = mean_stderr([r.train_loss for r in per_trial.values()])
            val_mean, val_se = mean_stderr([r.val_loss for r in per_trial.values()])
            writer.writerow(
                [*key, len(per_trial)]
                + [_fmt(v) for v in (train_mean, train_se, val_mean, val_se)]
            )
    return paths


def render_count_table(bias_included: bool = False, dims=None) -> str:
    """Aligned text table of closed-form counts, one column per (n_x, n_h)."""
    if dims is None:
        dims = [(7, 7), (5, 5)]
    rows: list[tuple[str, list[int]]] = []
    for kind in ("lstm", "gru"):
        rows.append(
            (
                kind.upper(),
                [
                    count_params(CountSpec(kind, d, bias_included=bias_included))
                    for d in dims
                ],
            )
        )
    for kind, label in (("darts", "DARTS"), ("two_to_one", "Two-to-One")):
        for m in range(2, 8):
            rows.append(
                (f"{label} m={m}", [count_params(CountSpec(kind, d, m=m)) for d in dims])
            )
    header = ["architecture"] + [f"{nx}x{nh}" for nx, nh in dims]
    widths = [max(len(header[0]), *(len(r[0]) for r in rows))] + [
        max(len(h), 6) for h in header[1:]
    ]
    lines = []
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for name, counts in rows:
        cells = [name.ljust(widths[0])] + [
            str(c).rjust(w) for c, w in zip(counts, widths[1:])
        ]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"
