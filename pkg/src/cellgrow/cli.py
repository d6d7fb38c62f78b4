"""Command-line front end.

Subcommands:
  search     grow-and-prune architecture search over one or more trials
  baseline   train a fixed cell or a classic recurrent baseline
  count      closed-form parameter-count tables
  gradcheck  finite-difference audit of every differentiable primitive
  export     re-merge per-trial metric files into run-level tables

Exit codes: 0 success, 1 configuration or I/O error, 2 numeric failure,
3 failed correctness check.

Configs are strict JSON: unknown keys are rejected, the schema is
versioned, and every run writes a resolved_config.json capturing all
effective values including the expanded per-trial seeds. All randomness
flows from one master seed through numpy SeedSequence spawning, so a
rerun with the same config and seed gives bit-identical metrics and
event files (wall-clock timings live in a separate file).
"""

import argparse
import concurrent.futures
import csv
import json
import os
import sys

import numpy as np

from .analysis import (
    CountSpec,
    MetricRecord,
    count_params,
    export_metrics,
    live_param_count,
    render_count_table,
)
from .autodiff import (
    NumericError,
    Tape,
    Tensor,
    add,
    add_bias,
    concat_cols,
    cross_entropy,
    hadamard,
    matmul,
    mean_all,
    mse,
    numerical_gradient,
    relu,
    scale,
    sigmoid,
    softmax,
    sub,
    sum_all,
    take_rows,
    tanh,
    weighted_sum,
)
from .bilevel import BilevelConfig, EarlyStop, train_stage
from .cells import build_baseline, build_darts, build_two_to_one, save_cell, unroll
from .morphism import ConfigError, MorphConfig, events_to_jsonl
from .search import BACKBONES, SearchConfig, run_search
from .tasks import (
    ForecastTask,
    LanguageTask,
    ParseError,
    cell_state_only,
    load_csv_series,
    load_text,
    synth_var_series,
)

SCHEMA_VERSION = 1

BASELINE_KINDS = ("lstm", "gru", "two_to_one", "darts")

# allowed keys per config block; anything else is rejected
_TOP_KEYS = {"schema_version", "task", "model", "search", "bilevel", "morph", "seed", "trials", "out"}
_TASK_KEYS = {
    "synth_var": {"kind", "d", "t", "lag", "noise", "window", "batch_size", "fractions"},
    "csv": {"kind", "path", "window", "batch_size", "fractions"},
    "text": {"kind", "path", "seq_len", "n_train", "n_val", "n_test", "batch_size"},
}
_MODEL_KEYS = {"backbone", "m0", "n_h", "cell_output"}
_SEARCH_KEYS = {
    "mode",
    "max_stages",
    "patience",
    "max_epochs",
    "tune_epochs",
    "op_patience",
    "dynamic_ops",
    "post_prune_tune",
    "selection_split",
}
_BILEVEL_KEYS = {"lr_w", "lr_alpha", "xi", "eps_scale", "order", "beta1", "beta2", "eps_adam"}
_MORPH_KEYS = {
    "delta",
    "sigma",
    "op_grow_threshold",
    "op_prune_threshold",
    "split_strategy",
    "keep_k",
    "split_eta_scale",
}

_TASK_DEFAULTS = {
    "synth_var": {
        "d": 7,
        "t": 2000,
        "lag": 2,
        "noise": 0.1,
        "window": 10,
        "batch_size": 50,
        "fractions": [0.8, 0.1, 0.1],
    },
    "csv": {"window": 10, "batch_size": 50, "fractions": [0.8, 0.1, 0.1]},
    "text": {"seq_len": 20, "n_train": 200, "n_val": 50, "n_test": 50, "batch_size": 50},
}
_MODEL_DEFAULTS = {"backbone": "two_to_one", "m0": 2, "n_h": 7, "cell_output": "mean"}


# ---------------------------------------------------------------------------
# configuration


def _reject_unknown(block: dict, allowed: set, where: str):
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {where + '.' + unknown[0]!r}")


def _fill(block: dict, defaults: dict) -> dict:
    out = dict(defaults)
    out.update(block)
    return out


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve_config(doc)


def resolve_config(doc: dict) -> dict:
    """Validate a raw config document and fill in every default."""
    _reject_unknown(doc, _TOP_KEYS, "config")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")

    task = doc.get("task", {"kind": "synth_var"})
    if not isinstance(task, dict) or "kind" not in task:
        raise ConfigError("task.kind is required")
    kind = task["kind"]
    if kind not in _TASK_KEYS:
        raise ConfigError(f"unknown task kind {kind!r}; expected one of {sorted(_TASK_KEYS)}")
    _reject_unknown(task, _TASK_KEYS[kind], "task")
    task = _fill(task, _TASK_DEFAULTS[kind])
    task["kind"] = kind
    if kind in ("csv", "text") and "path" not in task:
        raise ConfigError(f"task.path is required for {kind} tasks")

    model = doc.get("model", {})
    _reject_unknown(model, _MODEL_KEYS, "model")
    model = _fill(model, _MODEL_DEFAULTS)

    search = doc.get("search", {})
    _reject_unknown(search, _SEARCH_KEYS, "search")
    bilevel = doc.get("bilevel", {})
    _reject_unknown(bilevel, _BILEVEL_KEYS, "bilevel")
    morph = doc.get("morph", {})
    _reject_unknown(morph, _MORPH_KEYS, "morph")

    # constructing the config objects both validates the values and
    # resolves the derived defaults (xi <- lr_w, sigma <- delta, ...)
    bl = BilevelConfig(**bilevel)
    mo = MorphConfig(**morph)
    sc = SearchConfig(
        backbone=model["backbone"] if model["backbone"] in BACKBONES else "two_to_one",
        n_x=1,
        n_h=model["n_h"],
        m0=model["m0"],
        cell_output=model["cell_output"],
        bilevel=bl,
        morph=mo,
        **search,
    )

    trials = doc.get("trials", 1)
    if not isinstance(trials, int) or trials < 1:
        raise ConfigError(f"trials must be a positive integer, got {trials!r}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

    return {
        "schema_version": SCHEMA_VERSION,
        "task": task,
        "model": model,
        "search": {k: getattr(sc, k) for k in sorted(_SEARCH_KEYS)},
        "bilevel": {k: getattr(bl, k) for k in sorted(_BILEVEL_KEYS)},
        "morph": {k: getattr(mo, k) for k in sorted(_MORPH_KEYS)},
        "seed": seed,
        "trials": trials,
        "out": doc.get("out"),
    }


def trial_seed_table(master: int, trials: int) -> list[dict]:
    """Expand one master seed into independent per-trial seed triples."""
    table = []
    for i, ss in enumerate(np.random.SeedSequence(master).spawn(trials)):
        data_seed, head_seed, model_seed = (int(x) for x in ss.generate_state(3))
        table.append({"trial": i, "data": data_seed, "head": head_seed, "model": model_seed})
    return table


def _write_resolved(doc: dict, out_dir: str, command: str):
    resolved = dict(doc)
    resolved["command"] = command
    resolved["out"] = out_dir
    resolved["trial_seeds"] = trial_seed_table(doc["seed"], doc["trials"])
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# model and task assembly


def build_task(task_block: dict, n_h: int, data_seed: int, head_seed: int):
    """Returns (task, n_x): the harness plus the cell input width it implies."""
    kind = task_block["kind"]
    if kind == "synth_var":
        data = synth_var_series(
            seed=data_seed,
            d=task_block["d"],
            t=task_block["t"],
            lag=task_block["lag"],
            noise=task_block["noise"],
            window=task_block["window"],
            batch_size=task_block["batch_size"],
            fractions=tuple(task_block["fractions"]),
        )
        return ForecastTask(data, n_h=n_h, seed=head_seed), data.dim
    if kind == "csv":
        data = load_csv_series(
            task_block["path"],
            window=task_block["window"],
            batch_size=task_block["batch_size"],
            fractions=tuple(task_block["fractions"]),
        )
        return ForecastTask(data, n_h=n_h, seed=head_seed), data.dim
    data = load_text(
        task_block["path"],
        seq_len=task_block["seq_len"],
        n_train=task_block["n_train"],
        n_val=task_block["n_val"],
        n_test=task_block["n_test"],
        batch_size=task_block["batch_size"],
    )
    # symbols are embedded into the hidden width before entering the cell
    return LanguageTask(data, n_h=n_h, seed=head_seed), n_h


def _build_fixed_model(kind: str, n_x: int, n_h: int, m0: int, cell_output: str, seed: int):
    if kind == "lstm" or kind == "gru":
        return build_baseline(kind, n_x, n_h, seed=seed)
    if kind == "two_to_one":
        return build_two_to_one(n_x, n_h, m0, seed=seed)
    if kind == "darts":
        return build_darts(n_x, n_h, m0, seed=seed, cell_output=cell_output)
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {BASELINE_KINDS}")


# ---------------------------------------------------------------------------
# trial workers (module level so a process pool can pickle them)


def _trial_dir(out_dir: str, trial: int) -> str:
    path = os.path.join(out_dir, f"trial_{trial:03d}")
    os.makedirs(path, exist_ok=True)
    return path


def run_search_trial(doc: dict, trial: int, seeds: dict, out_dir: str) -> dict:
    model = doc["model"]
    if model["backbone"] not in BACKBONES:
        raise ConfigError(
            f"model.backbone must be one of {BACKBONES} for search, got {model['backbone']!r}"
        )
    task, n_x = build_task(doc["task"], model["n_h"], seeds["data"], seeds["head"])
    cfg = SearchConfig(
        backbone=model["backbone"],
        n_x=n_x,
        n_h=model["n_h"],
        m0=model["m0"],
        cell_output=model["cell_output"],
        seed=seeds["model"],
        bilevel=BilevelConfig(**doc["bilevel"]),
        morph=MorphConfig(**doc["morph"]),
        **doc["search"],
    )
    result = run_search(cfg, task, trial=trial)

    tdir = _trial_dir(out_dir, trial)
    export_metrics(result.history, tdir)
    with open(os.path.join(tdir, "events.jsonl"), "w") as fh:
        fh.write(events_to_jsonl(result.events))
    save_cell(
        os.path.join(tdir, "cell.json"),
        result.best_spec,
        cell_state_only(result.best_spec, result.best_state),
    )
    summary = {
        "trial": trial,
        "backbone": cfg.backbone,
        "mode": cfg.mode,
        "eva_best": result.eva_best,
        "eva_final": result.eva_final,
        "stages_run": result.stages_run,
        "node_count": result.best_spec.node_count,
        "param_count": live_param_count(result.best_state),
        "incomplete": result.incomplete,
        "note": result.note,
    }
    with open(os.path.join(tdir, "result.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return summary


def run_baseline_trial(doc: dict, trial: int, seeds: dict, out_dir: str) -> dict:
    model = doc["model"]
    kind = model["backbone"]
    task, n_x = build_task(doc["task"], model["n_h"], seeds["data"], seeds["head"])
    spec, state = _build_fixed_model(
        kind, n_x, model["n_h"], model["m0"], model["cell_output"], seeds["model"]
    )
    state = task.attach(state)
    stopping = EarlyStop(patience=doc["search"]["patience"], max_epochs=doc["search"]["max_epochs"])
    best, history = train_stage(
        spec,
        state,
        task,
        stopping,
        BilevelConfig(**doc["bilevel"]),
        update_alphas=kind in BACKBONES,
        trial=trial,
        mode="baseline",
        stage=0,
    )
    losses = {split: task.evaluate(spec, best, split) for split in ("train", "val", "test")}
    history.append(
        MetricRecord(
            trial=trial,
            backbone=kind,
            mode="baseline",
            stage=0,
            epoch=0,
            wall_clock_s=0.0,
            train_loss=losses["train"],
            val_loss=losses["val"],
            test_loss=losses["test"],
            node_count=getattr(spec, "node_count", 0),
            param_count=live_param_count(best),
            event="final",
        )
    )

    tdir = _trial_dir(out_dir, trial)
    export_metrics(history, tdir)
    with open(os.path.join(tdir, "events.jsonl"), "w") as fh:
        fh.write(events_to_jsonl([]))
    if kind in BACKBONES:
        save_cell(os.path.join(tdir, "cell.json"), spec, cell_state_only(spec, best))
    summary = {
        "trial": trial,
        "backbone": kind,
        "mode": "baseline",
        "train_loss": losses["train"],
        "val_loss": losses["val"],
        "test_loss": losses["test"],
        "param_count": live_param_count(best),
        "incomplete": False,
        "note": "",
    }
    with open(os.path.join(tdir, "result.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return summary


def _run_trials(worker, doc: dict, out_dir: str, jobs: int) -> list[dict]:
    seeds = trial_seed_table(doc["seed"], doc["trials"])
    if jobs <= 1 or doc["trials"] == 1:
        return [worker(doc, i, seeds[i], out_dir) for i in range(doc["trials"])]
    summaries = [None] * doc["trials"]
    with concurrent.futures.ProcessPoolExecutor(max_workers=min(jobs, doc["trials"])) as pool:
        futures = {
            pool.submit(worker, doc, i, seeds[i], out_dir): i for i in range(doc["trials"])
        }
        for fut in concurrent.futures.as_completed(futures):
            summaries[futures[fut]] = fut.result()
    return summaries


# ---------------------------------------------------------------------------
# metric file merging


def read_metrics_csv(metrics_path, timings_path=None) -> list[MetricRecord]:
    """Load a metrics table; timing rows are re-joined by position."""
    times = []
    if timings_path is not None and os.path.exists(timings_path):
        with open(timings_path, newline="") as fh:
            times = [float(row["wall_clock_s"]) for row in csv.DictReader(fh)]
    records = []
    with open(metrics_path, newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            records.append(
                MetricRecord(
                    trial=int(row["trial"]),
                    backbone=row["backbone"],
                    mode=row["mode"],
                    stage=int(row["stage"]),
                    epoch=int(row["epoch"]),
                    wall_clock_s=times[i] if i < len(times) else 0.0,
                    train_loss=float(row["train_loss"]),
                    val_loss=float(row["val_loss"]),
                    test_loss=float(row["test_loss"]) if row["test_loss"] else None,
                    node_count=int(row["node_count"]),
                    param_count=int(row["param_count"]),
                    event=row["event"],
                )
            )
    return records


def merge_run(out_dir: str) -> int:
    """Collect every trial_*/metrics.csv under out_dir into run-level files."""
    trial_dirs = sorted(
        d
        for d in os.listdir(out_dir)
        if d.startswith("trial_") and os.path.isdir(os.path.join(out_dir, d))
    )
    records = []
    for d in trial_dirs:
        metrics = os.path.join(out_dir, d, "metrics.csv")
        if os.path.exists(metrics):
            records.extend(read_metrics_csv(metrics, os.path.join(out_dir, d, "timings.csv")))
    if not records:
        raise ConfigError(f"no trial metrics found under {out_dir}")
    records.sort(key=lambda r: r.trial)
    export_metrics(records, out_dir)
    return len(records)


# ---------------------------------------------------------------------------
# gradient audit


def _fd_audit(forward, tensors, h=1e-5) -> float:
    """Worst relative disagreement between the tape and central differences.

    forward() must rebuild the graph from the live tensors each call, so
    the probe sees the perturbed arrays.
    """
    with Tape() as tape:
        loss = forward()
    grads = tape.backward(loss)

    def run(_):
        with Tape():
            return float(forward().data[0, 0])

    numeric = numerical_gradient(run, [t.data for t in tensors], h=h)
    worst = 0.0
    for t, num in zip(tensors, numeric):
        got = grads.get(t.tid)
        got = np.zeros(t.shape) if got is None else got
        denom = max(float(np.abs(num).max()), float(np.abs(got).max()), 1e-6)
        worst = max(worst, float(np.abs(got - num).max()) / denom)
    return worst


def _rand(rng, shape, lo=0.2):
    # keep magnitudes away from 0 so relu's kink never sits on a sample
    raw = rng.normal(size=shape)
    return np.sign(raw) * (np.abs(raw) + lo)


def _check_primitive(name):
    def check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        a = Tensor(_rand(rng, (3, 4)), requires_grad=True)
        b = Tensor(_rand(rng, (3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        bias = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        target = Tensor(rng.normal(size=(3, 4)))
        if name == "matmul":
            return _fd_audit(lambda: mean_all(matmul(a, w)), [a, w])
        if name == "add":
            return _fd_audit(lambda: mse(add(a, b), target), [a, b])
        if name == "sub":
            return _fd_audit(lambda: mse(sub(a, b), target), [a, b])
        if name == "hadamard":
            return _fd_audit(lambda: mse(hadamard(a, b), target), [a, b])
        if name == "scale":
            return _fd_audit(lambda: mse(scale(a, 0.7), target), [a])
        if name == "add_bias":
            return _fd_audit(lambda: mean_all(add_bias(matmul(a, w), bias)), [a, w, bias])
        if name == "sigmoid":
            return _fd_audit(lambda: mse(sigmoid(a), target), [a])
        if name == "tanh":
            return _fd_audit(lambda: mse(tanh(a), target), [a])
        if name == "relu":
            return _fd_audit(lambda: mse(relu(a), target), [a])
        if name == "softmax":
            return _fd_audit(lambda: mse(softmax(a), target), [a])
        if name == "weighted_sum":
            wts = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
            terms = [Tensor(rng.normal(size=(3, 4)), requires_grad=True) for _ in range(3)]
            return _fd_audit(lambda: mse(weighted_sum(wts, terms), target), [wts, *terms])
        if name == "concat_cols":
            wide = Tensor(rng.normal(size=(3, 8)))
            return _fd_audit(lambda: mse(concat_cols(a, b), wide), [a, b])
        if name == "take_rows":
            table = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
            idx = rng.integers(0, 6, size=5)
            tgt = Tensor(rng.normal(size=(5, 4)))
            return _fd_audit(lambda: mse(take_rows(table, idx), tgt), [table])
        if name == "sum_all":
            return _fd_audit(lambda: sum_all(hadamard(a, a)), [a])
        if name == "mean_all":
            return _fd_audit(lambda: mean_all(hadamard(a, b)), [a, b])
        if name == "mse":
            return _fd_audit(lambda: mse(a, target), [a])
        if name == "cross_entropy":
            logits = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
            labels = rng.integers(0, 5, size=4)
            return _fd_audit(lambda: cross_entropy(logits, labels), [logits])
        raise ValueError(name)

    return check


def _check_unrolled(kind):
    def check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        if kind == "two_to_one":
            spec, state = build_two_to_one(3, 3, m=2, seed=seed)
        elif kind == "darts":
            spec, state = build_darts(3, 3, m=2, seed=seed)
        else:
            spec, state = build_baseline(kind, 3, 3, seed=seed)
        xs = [Tensor(rng.normal(size=(2, 3))) for _ in range(10)]
        target = Tensor(rng.normal(size=(2, 3)))
        h0 = Tensor(np.zeros((2, 3)))
        params = list(state.weights.values()) + list(state.alphas.values())

        def forward():
            return mse(unroll(spec, state, xs, h0)[-1], target)

        return _fd_audit(forward, params)

    return check


GRADCHECKS = [(name, _check_primitive(name)) for name in (
    "matmul",
    "add",
    "sub",
    "hadamard",
    "scale",
    "add_bias",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "weighted_sum",
    "concat_cols",
    "take_rows",
    "sum_all",
    "mean_all",
    "mse",
    "cross_entropy",
)] + [
    ("two_to_one unrolled 10 steps", _check_unrolled("two_to_one")),
    ("darts unrolled 10 steps", _check_unrolled("darts")),
    ("lstm unrolled 10 steps", _check_unrolled("lstm")),
    ("gru unrolled 10 steps", _check_unrolled("gru")),
]


def run_gradchecks(seeds: int = 3, tolerance: float = 1e-4, checks=None) -> list[dict]:
    results = []
    for name, fn in checks if checks is not None else GRADCHECKS:
        worst = max(fn(seed) for seed in range(seeds))
        results.append({"name": name, "max_rel_err": worst, "ok": worst <= tolerance})
    return results


# ---------------------------------------------------------------------------
# subcommand handlers


def _resolve_out(args, doc=None) -> str:
    out = args.out or (doc.get("out") if doc else None)
    if not out:
        raise ConfigError("missing output directory: set 'out' in the config or pass --out")
    os.makedirs(out, exist_ok=True)
    return out


def _load_run_config(args) -> dict:
    if not args.config:
        raise ConfigError("--config PATH is required for this command")
    doc = load_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    return doc


def _cmd_run(args, worker, command: str) -> int:
    doc = _load_run_config(args)
    out_dir = _resolve_out(args, doc)
    _write_resolved(doc, out_dir, command)
    summaries = _run_trials(worker, doc, out_dir, args.jobs)
    failed = sum(s["incomplete"] for s in summaries)
    try:
        merge_run(out_dir)
    except ConfigError:
        if not failed:  # only tolerate missing metrics when trials failed
            raise
    for s in summaries:
        tag = "FAILED" if s["incomplete"] else "ok"
        key = "eva_best" if "eva_best" in s else "val_loss"
        print(f"trial {s['trial']}: {key}={s[key]:.6g} [{tag}]{' ' + s['note'] if s['note'] else ''}")
    print(f"wrote {doc['trials']} trial(s) under {out_dir}")
    return 2 if failed else 0


def cmd_search(args) -> int:
    return _cmd_run(args, run_search_trial, "search")


def cmd_baseline(args) -> int:
    return _cmd_run(args, run_baseline_trial, "baseline")


def cmd_count(args) -> int:
    if args.n_x or args.n_h or args.m:
        if not (args.n_x and args.n_h):
            raise ConfigError("an explicit count needs both --n-x and --n-h")
        spec = CountSpec(
            args.backbone, (args.n_x, args.n_h), m=args.m or 1, bias_included=args.bias
        )
        print(f"{args.backbone} ({args.n_x}x{args.n_h}, m={spec.m}): {count_params(spec)}")
        return 0
    dims = {"g7": [(7, 7)], "brics": [(5, 5)], "both": None}[args.preset]
    sys.stdout.write(render_count_table(bias_included=args.bias, dims=dims))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(seeds=args.seeds, tolerance=args.tolerance)
    width = max(len(r["name"]) for r in results)
    for r in results:
        status = "ok" if r["ok"] else "FAIL"
        print(f"{r['name'].ljust(width)}  max rel err {r['max_rel_err']:.3e}  {status}")
    bad = [r for r in results if not r["ok"]]
    if bad:
        print(f"{len(bad)} of {len(results)} checks exceeded tolerance {args.tolerance:g}")
        return 3
    print(f"all {len(results)} checks passed (tolerance {args.tolerance:g}, {args.seeds} seeds)")
    return 0


def cmd_export(args) -> int:
    out_dir = _resolve_out(args)
    n = merge_run(out_dir)
    print(f"merged {n} records into {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p):
    p.add_argument("--config", help="path to a JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel trial workers")
    p.add_argument("--out", default=None, help="output directory (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellgrow", description=__doc__.split("\n")[0])
    subs = parser.add_subparsers(dest="command")

    p = subs.add_parser("search", help="run the growing architecture search")
    _add_run_flags(p)
    p.set_defaults(handler=cmd_search)

    p = subs.add_parser("baseline", help="train a fixed cell or recurrent baseline")
    _add_run_flags(p)
    p.set_defaults(handler=cmd_baseline)

    p = subs.add_parser("count", help="closed-form parameter-count tables")
    p.add_argument("--preset", choices=("g7", "brics", "both"), default="both")
    p.add_argument("--bias", action="store_true", help="include bias terms in the counts")
    p.add_argument("--backbone", default="two_to_one", choices=("lstm", "gru", "rnn") + BACKBONES)
    p.add_argument("--n-x", type=int, default=None)
    p.add_argument("--n-h", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.set_defaults(handler=cmd_count)

    p = subs.add_parser("gradcheck", help="finite-difference audit of all gradients")
    p.add_argument("--seeds", type=int, default=3, help="random draws per check")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(handler=cmd_gradcheck)

    p = subs.add_parser("export", help="re-merge per-trial metrics in a run directory")
    p.add_argument("--out", required=False, default=None, help="run directory to merge")
    p.set_defaults(handler=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits with 2 on usage errors
        return 0 if not exc.code else 1
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.handler(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
