"""Growing-architecture-search controller.

The search alternates training stages with structural updates: every
stage trains the current mixed-operator cell to a validation plateau,
the stage result is scored, and a node is grafted on for the next stage
while the score keeps improving. Two pruning regimes are supported:

- prune_each_stage: every stage's supernet is pruned to its strongest
  ops, fine-tuned, and scored in that collapsed form; growth continues
  from the unpruned supernet.
- prune_at_end: stages are scored as full mixed supernets and only the
  best one is collapsed once the loop exits.

Optionally the stage trainer also reshapes operators mid-flight
(duplicating a dominant op, splitting a stalled one along its sharpest
negative curvature direction, dropping a negligible one).

The returned event log is the delivered architecture's ancestry: events
recorded after the last improvement are discarded together with the
architectures they produced, so replaying the log against the initial
cell reconstructs the delivered spec exactly.
"""

import math
import time
from dataclasses import dataclass, field
from itertools import cycle

import numpy as np

from .analysis import MetricRecord, live_param_count
from .bilevel import AdamState, BilevelConfig, EarlyStop, arch_step, train_stage, weight_step
from .cells import CellSpec, ModelState, build_darts, build_two_to_one
from .morphism import (
    ConfigError,
    GrowthEvent,
    MorphConfig,
    SplitReport,
    clone_state,
    criteria_check,
    find_prune_candidate,
    grow_node,
    grow_operator_morph,
    grow_operator_split,
    kept_op_indices,
    max_op_weight,
    plateaued,
    prune_operator_dynamic,
    prune_stage,
    split_report,
)

MODES = ("prune_each_stage", "prune_at_end")
BACKBONES = ("two_to_one", "darts")


@dataclass
class SearchConfig:
    backbone: str = "two_to_one"
    n_x: int = 7
    n_h: int = 7
    mode: str = "prune_each_stage"
    m0: int = 2
    max_stages: int = 4
    patience: int = 2
    max_epochs: int = 20
    tune_epochs: int = 10
    op_patience: int | None = None  # dynamic-op plateau window; default patience
    dynamic_ops: bool = False
    post_prune_tune: bool = False
    selection_split: str = "val"
    cell_output: str = "mean"
    seed: int = 0
    morph: MorphConfig = field(default_factory=MorphConfig)
    bilevel: BilevelConfig = field(default_factory=BilevelConfig)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.m0 < 1:
            raise ConfigError(f"m0 must be at least 1, got {self.m0}")
        if self.max_stages < 1:
            raise ConfigError(f"max_stages must be at least 1, got {self.max_stages}")
        if self.patience < 1 or self.max_epochs < 1 or self.tune_epochs < 1:
            raise ConfigError("patience, max_epochs and tune_epochs must be at least 1")
        if self.op_patience is None:
            self.op_patience = self.patience
        if self.op_patience < 1:
            raise ConfigError(f"op_patience must be at least 1, got {self.op_patience}")
        if self.selection_split not in ("val", "test"):
            raise ConfigError(f"selection_split must be 'val' or 'test', got {self.selection_split!r}")


@dataclass
class SearchResult:
    best_spec: CellSpec  # delivered (pruned) architecture
    best_state: ModelState
    supernet_spec: CellSpec  # mixed-operator architecture behind it
    supernet_state: ModelState
    eva_best: float
    eva_final: float  # score of the delivered architecture on the test split
    stages_run: int
    history: list
    events: list
    stage_seconds: list
    incomplete: bool = False
    note: str = ""


def build_cell(cfg: SearchConfig) -> tuple[CellSpec, ModelState]:
    if cfg.backbone == "darts":
        return build_darts(cfg.n_x, cfg.n_h, cfg.m0, seed=cfg.seed, cell_output=cfg.cell_output)
    return build_two_to_one(cfg.n_x, cfg.n_h, cfg.m0, seed=cfg.seed)


def update_nodes(spec, state, cfg: SearchConfig, rng):
    """Graft one node onto the cell, inheriting every existing parameter."""
    return grow_node(spec, state, cfg.morph, rng)


def update_operations(spec, state, decision: str, cfg: SearchConfig, rng, report: SplitReport = None):
    """Apply one operator-level transform chosen by criteria_check."""
    morph = cfg.morph
    if decision == "prune_op":
        edge_id = find_prune_candidate(spec, state, morph)
        if edge_id is None:
            return spec, state, None
        return prune_operator_dynamic(spec, state, edge_id, morph)
    if decision == "grow_op":
        edge_id, _ = max_op_weight(spec, state)
        return grow_operator_morph(spec, state, edge_id, morph, rng)
    if decision == "split_op":
        if report is None:
            raise ValueError("split decision needs a curvature report")
        negatives = report.negative_entries()
        if not negatives:
            return spec, state, None
        target = min(negatives, key=lambda e: e.lam_sum)
        return grow_operator_split(spec, state, target.edge_id, report, morph, rng)
    raise ValueError(f"unknown operator decision {decision!r}")


def _scan_split_reports(spec, state, ctx) -> SplitReport:
    entries = []
    for edge in spec.edges:
        entries.extend(split_report(spec, state, edge, ctx).entries)
    return SplitReport(entries)


def _sync_moments(w_opt: AdamState, a_opt: AdamState, state: ModelState) -> None:
    # transforms add/remove parameters and reshape alpha rows; stale or
    # mismatched accumulators restart from zero
    w_opt.drop_missing(set(state.weights))
    for eid in list(a_opt.slots):
        if eid not in state.alphas or a_opt.slots[eid][0].shape != state.alphas[eid].shape:
            del a_opt.slots[eid]


def run_stage(spec, state, task, cfg: SearchConfig, rng=None, *, stage=0, trial=0):
    """Train one architecture to its validation plateau.

    Returns (spec, state, history, events) where spec/state are the best
    validation checkpoint and events list only the operator transforms
    that are part of that checkpoint's ancestry. The incoming state is
    left untouched.
    """
    bl = cfg.bilevel
    work = clone_state(state)
    w_opt = AdamState(bl.lr_w, bl.beta1, bl.beta2, bl.eps_adam)
    a_opt = AdamState(bl.lr_alpha, bl.beta1, bl.beta2, bl.eps_adam)

    def loss_fn(batch):
        return task.loss(spec, work, batch)

    val_list = list(task.val_batches())
    if not val_list:
        raise ValueError("validation stream is empty")
    val_iter = cycle(val_list)

    history: list[MetricRecord] = []
    events: list[GrowthEvent] = []
    vals: list[float] = []
    best = (spec, clone_state(work), 0)  # spec, state snapshot, event count
    best_val = math.inf
    last_transform = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        seen = 0
        for batch in task.train_batches():
            seen += 1
            arch_step(work, a_opt, loss_fn, batch, next(val_iter), bl)
            weight_step(work, w_opt, loss_fn, batch)
        if seen == 0:
            raise ValueError("training stream is empty")
        train_loss = task.evaluate(spec, work, "train")
        val_loss = task.evaluate(spec, work, "val")
        vals.append(val_loss)
        history.append(
            MetricRecord(
                trial=trial,
                backbone=spec.backbone,
                mode=cfg.mode,
                stage=stage,
                epoch=epoch,
                wall_clock_s=time.perf_counter() - t0,
                train_loss=train_loss,
                val_loss=val_loss,
                node_count=spec.node_count,
                param_count=live_param_count(work),
            )
        )
        if val_loss < best_val:
            best_val = val_loss
            best = (spec, clone_state(work), len(events))
        if plateaued(vals, cfg.patience):
            break
        if not cfg.dynamic_ops or epoch - last_transform <= cfg.op_patience:
            continue

        decision = criteria_check(
            vals,
            cfg.morph,
            node_patience=cfg.patience,
            op_patience=cfg.op_patience,
            max_edge_weight=max_op_weight(spec, work)[1],
            prune_candidate=find_prune_candidate(spec, work, cfg.morph) is not None,
        )
        report = None
        if decision == "continue" and plateaued(vals, cfg.op_patience):
            probe = getattr(task, "split_context", None)
            if probe is not None:
                report = _scan_split_reports(spec, work, probe(spec, work))
                if report.negative_entries():
                    decision = "split_op"
        if decision in ("prune_op", "grow_op", "split_op"):
            spec, work, event = update_operations(spec, work, decision, cfg, rng, report)
            if event is not None:
                events.append(event)
                last_transform = epoch
                _sync_moments(w_opt, a_opt, work)
                history[-1].event = decision

    best_spec, best_state, n_events = best
    return best_spec, best_state, history, events[:n_events]


def tune(spec, state, task, cfg: SearchConfig, *, trial=0, stage=0):
    """Weight-only fine-tune with frozen logits; never returns a state
    whose validation loss is worse than the input's."""
    stopping = EarlyStop(patience=cfg.patience, max_epochs=cfg.tune_epochs)
    before = task.evaluate(spec, state, "val")
    tuned, hist = train_stage(
        spec,
        state,
        task,
        stopping,
        cfg.bilevel,
        update_alphas=False,
        trial=trial,
        mode=cfg.mode,
        stage=stage,
    )
    for row in hist:
        row.event = "tune"
    if task.evaluate(spec, tuned, "val") > before:
        return clone_state(state), hist
    return tuned, hist


def _prune_stage_event(kept: dict) -> GrowthEvent:
    return GrowthEvent(kind="prune_stage", targets={"kept": {k: list(v) for k, v in kept.items()}})


def _eval_record(task, spec, state, cfg, *, trial, stage, epoch, event) -> MetricRecord:
    return MetricRecord(
        trial=trial,
        backbone=spec.backbone,
        mode=cfg.mode,
        stage=stage,
        epoch=epoch,
        wall_clock_s=0.0,
        train_loss=task.evaluate(spec, state, "train"),
        val_loss=task.evaluate(spec, state, "val"),
        test_loss=task.evaluate(spec, state, "test"),
        node_count=spec.node_count,
        param_count=live_param_count(state),
        event=event,
    )


def run_search(cfg: SearchConfig, task, *, trial=0) -> SearchResult:
    """Grow, score, and keep the best architecture.

    Every stage trains the current cell, scores it (pruned+tuned in
    prune_each_stage mode, as a supernet otherwise), and either grows a
    node for the next stage or stops at the first non-improvement. The
    selection score defaults to the validation split; the test score is
    recorded alongside either way.
    """
    rng = np.random.default_rng(cfg.seed)
    spec, state = build_cell(cfg)
    attach = getattr(task, "attach", None)
    if attach is not None:
        state = attach(state)  # task-side parameters (heads, embeddings)

    history: list[MetricRecord] = []
    events: list[GrowthEvent] = []
    stage_seconds: list[float] = []
    eva_best = math.inf
    best = (spec, state, 0, None)  # supernet spec/state, lineage length, pruned artifact
    incomplete = False
    note = ""
    stages_run = 0

    for stage in range(cfg.max_stages):
        t0 = time.perf_counter()
        try:
            spec, state, hist, evs = run_stage(spec, state, task, cfg, rng, stage=stage, trial=trial)
            history.extend(hist)
            events.extend(evs)
            last_epoch = hist[-1].epoch
            if cfg.mode == "prune_each_stage":
                kept = kept_op_indices(spec, state, cfg.morph)
                pspec, pstate = prune_stage(spec, state, cfg.morph)
                pstate, tune_hist = tune(pspec, pstate, task, cfg, trial=trial, stage=stage)
                history.extend(tune_hist)
                record = _eval_record(
                    task, pspec, pstate, cfg,
                    trial=trial, stage=stage, epoch=last_epoch, event="evaluate",
                )
                scored = (pspec, pstate, _prune_stage_event(kept), record.test_loss)
            else:
                scored = None
                record = _eval_record(
                    task, spec, state, cfg,
                    trial=trial, stage=stage, epoch=last_epoch, event="evaluate",
                )
            history.append(record)
            eva = record.val_loss if cfg.selection_split == "val" else record.test_loss
        except Exception as exc:  # a broken stage still yields a usable partial result
            incomplete = True
            note = f"stage {stage} failed: {exc!r}"
            stage_seconds.append(time.perf_counter() - t0)
            stages_run = stage + 1
            break
        stage_seconds.append(time.perf_counter() - t0)
        stages_run = stage + 1
        if eva < eva_best:
            eva_best = eva
            best = (spec, state, len(events), scored)
            if stage + 1 < cfg.max_stages:
                spec, state, event = update_nodes(spec, state, cfg, rng)
                events.append(event)
        else:
            break

    supernet_spec, supernet_state, n_events, scored = best
    lineage = events[:n_events]
    if scored is not None:
        best_spec, best_state, prune_event, eva_final = scored
        lineage.append(prune_event)
    else:
        kept = kept_op_indices(supernet_spec, supernet_state, cfg.morph)
        best_spec, best_state = prune_stage(supernet_spec, supernet_state, cfg.morph)
        lineage.append(_prune_stage_event(kept))
        if cfg.post_prune_tune:
            best_state, tune_hist = tune(best_spec, best_state, task, cfg, trial=trial, stage=stages_run - 1)
            history.extend(tune_hist)
        eva_final = None
    if eva_final is None:
        try:
            final_record = _eval_record(
                task, best_spec, best_state, cfg,
                trial=trial, stage=max(stages_run - 1, 0), epoch=0, event="final",
            )
            history.append(final_record)
            eva_final = final_record.test_loss
        except Exception as exc:
            incomplete = True
            note = note or f"final evaluation failed: {exc!r}"
            eva_final = math.nan

    return SearchResult(
        best_spec=best_spec,
        best_state=best_state,
        supernet_spec=supernet_spec,
        supernet_state=supernet_state,
        eva_best=eva_best,
        eva_final=eva_final,
        stages_run=stages_run,
        history=history,
        events=lineage,
        stage_seconds=stage_seconds,
        incomplete=incomplete,
        note=note,
    )
