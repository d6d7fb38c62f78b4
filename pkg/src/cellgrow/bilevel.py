"""Alternating optimization of operator weights and edge logits.

The two parameter groups in a ModelState are trained against different
objectives: weights descend the training loss, edge logits descend the
validation loss. The logit update can optionally look one weight step
ahead (a scratch update w' = w - xi * dL_train/dw) and correct for it
with a finite-difference curvature term; with xi = 0 the lookahead
collapses to the plain validation gradient.

Each training stage owns its own Adam accumulators, so a stage started
after a structural transform begins with zeroed moments for every
parameter, new and old alike.
"""

import math
import time
from dataclasses import dataclass
from itertools import cycle

import numpy as np

from .analysis import MetricRecord, live_param_count
from .autodiff import NumericError, Tape
from .cells import ModelState
from .morphism import ConfigError, clone_state


@dataclass
class BilevelConfig:
    lr_w: float = 0.001
    lr_alpha: float = 0.0003
    xi: float | None = None  # lookahead step size; None means lr_w
    eps_scale: float = 0.01
    order: str = "second"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if self.lr_w <= 0.0:
            raise ConfigError(f"lr_w must be positive, got {self.lr_w}")
        if self.lr_alpha <= 0.0:
            raise ConfigError(f"lr_alpha must be positive, got {self.lr_alpha}")
        if self.xi is None:
            self.xi = self.lr_w
        if self.xi < 0.0:
            raise ConfigError(f"xi must be nonnegative, got {self.xi}")
        if self.eps_scale <= 0.0:
            raise ConfigError(f"eps_scale must be positive, got {self.eps_scale}")
        if self.order not in ("first", "second"):
            raise ConfigError(f"order must be 'first' or 'second', got {self.order!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.eps_adam <= 0.0:
            raise ConfigError(f"eps_adam must be positive, got {self.eps_adam}")


class AdamState:
    """Per-parameter Adam moments; unseen keys start from zeroed moments."""

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.slots: dict = {}  # key -> [m, v, step]

    def apply(self, key, tensor, grad: np.ndarray) -> None:
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter {key!r}")
        slot = self.slots.get(key)
        if slot is None:
            slot = self.slots[key] = [np.zeros(tensor.shape), np.zeros(tensor.shape), 0]
        slot[2] += 1
        t = slot[2]
        m = slot[0] = self.beta1 * slot[0] + (1.0 - self.beta1) * grad
        v = slot[1] = self.beta2 * slot[1] + (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def drop_missing(self, live_keys) -> None:
        """Forget accumulators for parameters that no longer exist."""
        for key in list(self.slots):
            if key not in live_keys:
                del self.slots[key]


def _loss_and_grads(loss_fn, batch):
    with Tape() as tape:
        loss = loss_fn(batch)
    grads = tape.backward(loss)
    return float(loss.data[0, 0]), grads


def weight_step(state: ModelState, opt: AdamState, loss_fn, batch) -> float:
    """One Adam update of every weight; edge logits are left untouched.

    loss_fn(batch) must build a 1x1 loss tensor from the live state.
    Returns the pre-update loss value.
    """
    loss, grads = _loss_and_grads(loss_fn, batch)
    # cell weights use int ids, task heads use str names; order ints first
    for pid in sorted(state.weights, key=lambda k: (isinstance(k, str), k)):
        tensor = state.weights[pid]
        grad = grads.get(tensor.tid)
        if grad is not None:
            opt.apply(pid, tensor, grad)
    return loss


def arch_step_first_order(state: ModelState, opt: AdamState, loss_fn, val_batch) -> float:
    """Update the edge logits against the validation loss, weights frozen."""
    loss, grads = _loss_and_grads(loss_fn, val_batch)
    for eid in sorted(state.alphas):
        tensor = state.alphas[eid]
        grad = grads.get(tensor.tid)
        if grad is not None:
            opt.apply(eid, tensor, grad)
    return loss


def _alpha_grads(state: ModelState, grads) -> dict:
    out = {}
    for eid, tensor in state.alphas.items():
        g = grads.get(tensor.tid)
        out[eid] = np.zeros(tensor.shape) if g is None else g
    return out


def second_order_hypergrad(state: ModelState, loss_fn, train_batch, val_batch, cfg):
    """Assemble the lookahead hypergradient for every edge-logit row.

    Computes w' = w - xi * dL_train/dw on a scratch copy, takes the
    validation gradient there, and corrects it with the symmetric
    difference of the train logit gradient at w +- eps * dL_val/dw',
    eps = eps_scale / ||dL_val/dw'||. A zero validation weight gradient
    (or xi = 0) drops the correction. Returns (per-edge gradients,
    validation loss at the lookahead point); the weights are restored
    bit-exactly before returning.
    """
    if cfg.xi == 0.0:
        loss, grads = _loss_and_grads(loss_fn, val_batch)
        return _alpha_grads(state, grads), loss

    # ops never write into parameter arrays, so keeping references (not
    # copies) is enough for an exact restore
    saved = {pid: t.data for pid, t in state.weights.items()}

    _, train_grads = _loss_and_grads(loss_fn, train_batch)
    for pid, tensor in state.weights.items():
        g = train_grads.get(tensor.tid)
        if g is not None:
            tensor.data = saved[pid] - cfg.xi * g

    val_loss, val_grads = _loss_and_grads(loss_fn, val_batch)
    alpha_val = _alpha_grads(state, val_grads)
    g_w = {pid: val_grads.get(t.tid) for pid, t in state.weights.items()}
    gnorm = math.sqrt(sum(float((g * g).sum()) for g in g_w.values() if g is not None))

    if gnorm == 0.0:
        for pid, tensor in state.weights.items():
            tensor.data = saved[pid]
        return alpha_val, val_loss

    eps = cfg.eps_scale / gnorm
    for sign in (1.0, -1.0):
        for pid, tensor in state.weights.items():
            g = g_w[pid]
            tensor.data = saved[pid] if g is None else saved[pid] + sign * eps * g
        _, probe_grads = _loss_and_grads(loss_fn, train_batch)
        if sign > 0:
            alpha_plus = _alpha_grads(state, probe_grads)
        else:
            alpha_minus = _alpha_grads(state, probe_grads)

    for pid, tensor in state.weights.items():
        tensor.data = saved[pid]

    factor = cfg.xi / (2.0 * eps)
    hyper = {
        eid: alpha_val[eid] - factor * (alpha_plus[eid] - alpha_minus[eid])
        for eid in state.alphas
    }
    return hyper, val_loss


def arch_step_second_order(
    state: ModelState, opt: AdamState, loss_fn, train_batch, val_batch, cfg: BilevelConfig
) -> float:
    hyper, val_loss = second_order_hypergrad(state, loss_fn, train_batch, val_batch, cfg)
    for eid in sorted(state.alphas):
        opt.apply(eid, state.alphas[eid], hyper[eid])
    return val_loss


def arch_step(state, opt, loss_fn, train_batch, val_batch, cfg: BilevelConfig) -> float:
    if cfg.order == "first" or cfg.xi == 0.0:
        return arch_step_first_order(state, opt, loss_fn, val_batch)
    return arch_step_second_order(state, opt, loss_fn, train_batch, val_batch, cfg)


@dataclass
class EarlyStop:
    patience: int = 2
    max_epochs: int = 50

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")


def train_stage(
    spec,
    state: ModelState,
    task,
    stopping: EarlyStop,
    cfg: BilevelConfig | None = None,
    *,
    update_alphas: bool = True,
    trial: int = 0,
    mode: str = "search",
    stage: int = 0,
) -> tuple[ModelState, list[MetricRecord]]:
    """Alternate logit and weight updates until the validation loss stalls.

    task supplies train_batches(), val_batches(), loss(spec, state, batch)
    building a 1x1 tensor under the active tape, and evaluate(spec, state,
    split) -> float for the epoch summaries. Per mini-batch one logit step
    runs first (validation batches drawn round-robin), then one weight
    step. The incoming state is never mutated; the returned state is the
    snapshot from the best validation epoch.
    """
    cfg = cfg or BilevelConfig()
    work = clone_state(state)
    w_opt = AdamState(cfg.lr_w, cfg.beta1, cfg.beta2, cfg.eps_adam)
    a_opt = AdamState(cfg.lr_alpha, cfg.beta1, cfg.beta2, cfg.eps_adam)

    def loss_fn(batch):
        return task.loss(spec, work, batch)

    backbone = getattr(spec, "backbone", None) or getattr(spec, "kind", "")
    node_count = getattr(spec, "node_count", 0)
    dynamic = update_alphas and bool(work.alphas)
    val_iter = None
    if dynamic:
        val_list = list(task.val_batches())
        if not val_list:
            raise ValueError("validation stream is empty")
        val_iter = cycle(val_list)

    history: list[MetricRecord] = []
    best_val = math.inf
    best_epoch = 0
    best_state = clone_state(work)
    for epoch in range(1, stopping.max_epochs + 1):
        t0 = time.perf_counter()
        seen = 0
        for batch in task.train_batches():
            seen += 1
            if dynamic:
                arch_step(work, a_opt, loss_fn, batch, next(val_iter), cfg)
            weight_step(work, w_opt, loss_fn, batch)
        if seen == 0:
            raise ValueError("training stream is empty")
        train_loss = task.evaluate(spec, work, "train")
        val_loss = task.evaluate(spec, work, "val")
        history.append(
            MetricRecord(
                trial=trial,
                backbone=backbone,
                mode=mode,
                stage=stage,
                epoch=epoch,
                wall_clock_s=time.perf_counter() - t0,
                train_loss=train_loss,
                val_loss=val_loss,
                node_count=node_count,
                param_count=live_param_count(work),
            )
        )
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = clone_state(work)
        elif epoch - best_epoch >= stopping.patience:
            break
    return best_state, history
