"""Alternating-optimization tests.

Oracles: hand-computed Adam steps, central finite differences for the
logit gradient, and the closed-form lookahead derivative of the 1-D
quadratic pair train=(w-a)^2 / val=w^2, whose exact hypergradient is
4*xi*w' with w' = w - 2*xi*(w-a).
"""

import numpy as np
import pytest

from cellgrow.analysis import inventory
from cellgrow.autodiff import (
    NumericError,
    Tape,
    Tensor,
    hadamard,
    mse,
    softmax,
    sub,
    sum_all,
    weighted_sum,
)
from cellgrow.bilevel import (
    AdamState,
    BilevelConfig,
    EarlyStop,
    arch_step,
    arch_step_first_order,
    arch_step_second_order,
    second_order_hypergrad,
    train_stage,
    weight_step,
)
from cellgrow.cells import ModelState, build_two_to_one, unroll
from cellgrow.morphism import ConfigError, clone_state


def quad_state(w0: float, a0: float) -> ModelState:
    return ModelState(
        weights={0: Tensor([[w0]], requires_grad=True)},
        alphas={0: Tensor([[a0]], requires_grad=True)},
    )


def quad_loss(state: ModelState):
    def loss_fn(batch):
        w = state.weights[0]
        a = state.alphas[0]
        if batch == "train":
            d = sub(w, a)
            return sum_all(hadamard(d, d))
        return sum_all(hadamard(w, w))

    return loss_fn


def weight_bytes(state):
    return {pid: t.data.tobytes() for pid, t in state.weights.items()}


def alpha_bytes(state):
    return {eid: t.data.tobytes() for eid, t in state.alphas.items()}


def make_batch(spec, rng, batch=4, steps=3):
    xs = [Tensor(rng.standard_normal((batch, spec.n_x))) for _ in range(steps)]
    h0 = Tensor(np.zeros((batch, spec.n_h)))
    target = Tensor(rng.standard_normal((batch, spec.n_h)))
    return xs, h0, target


def cell_loss(spec, state, batch):
    xs, h0, target = batch
    hs = unroll(spec, state, xs, h0)
    return mse(hs[-1], target)


class TinyCellTask:
    """Fixed random batches over a real cell; mean split loss for eval."""

    def __init__(self, spec, seed=0, n_train=3, n_val=2):
        rng = np.random.default_rng(seed)
        self._train = [make_batch(spec, rng) for _ in range(n_train)]
        self._val = [make_batch(spec, rng) for _ in range(n_val)]

    def train_batches(self):
        return self._train

    def val_batches(self):
        return self._val

    def loss(self, spec, state, batch):
        return cell_loss(spec, state, batch)

    def evaluate(self, spec, state, split):
        batches = self._train if split == "train" else self._val
        vals = [float(self.loss(spec, state, b).data[0, 0]) for b in batches]
        return sum(vals) / len(vals)


class QuadTask:
    """1-D convex playground; optionally scripts the reported val loss."""

    def __init__(self, scripted_val=None):
        self.scripted = list(scripted_val) if scripted_val is not None else None

    def train_batches(self):
        return ["train"]

    def val_batches(self):
        return ["val"]

    def loss(self, spec, state, batch):
        return quad_loss(state)(batch)

    def evaluate(self, spec, state, split):
        if self.scripted is not None and split == "val":
            return self.scripted.pop(0)
        w = float(state.weights[0].data[0, 0])
        a = float(state.alphas[0].data[0, 0])
        return (w - a) ** 2 if split == "train" else w * w


# ---------------------------------------------------------------------------
# configuration


@pytest.mark.parametrize(
    "kwargs",
    [
        {"lr_w": 0.0},
        {"lr_w": -1.0},
        {"lr_alpha": 0.0},
        {"xi": -0.1},
        {"eps_scale": 0.0},
        {"order": "third"},
        {"beta1": 1.0},
        {"beta2": -0.1},
        {"eps_adam": 0.0},
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        BilevelConfig(**kwargs)


def test_config_defaults():
    cfg = BilevelConfig()
    assert cfg.lr_w == 0.001
    assert cfg.lr_alpha == 0.0003
    assert cfg.xi == cfg.lr_w  # unset lookahead follows the weight rate
    assert cfg.order == "second"


def test_early_stop_rejects_bad_values():
    with pytest.raises(ConfigError):
        EarlyStop(patience=0)
    with pytest.raises(ConfigError):
        EarlyStop(max_epochs=0)


# ---------------------------------------------------------------------------
# Adam


def test_adam_single_step_matches_hand_computation():
    opt = AdamState(lr=0.1)
    t = Tensor([[1.0]], requires_grad=True)
    opt.apply("p", t, np.array([[0.5]]))
    m = 0.1 * 0.5
    v = 0.001 * 0.25
    m_hat = m / 0.1
    v_hat = v / 0.001
    expected = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert t.data[0, 0] == pytest.approx(expected, rel=1e-15)


def test_adam_zero_gradient_leaves_parameter_unchanged():
    opt = AdamState(lr=0.1)
    t = Tensor([[2.5, -1.0]], requires_grad=True)
    before = t.data.copy()
    opt.apply("p", t, np.zeros((1, 2)))
    assert np.array_equal(t.data, before)


def test_adam_rejects_non_finite_gradient_naming_the_parameter():
    opt = AdamState(lr=0.1)
    t = Tensor([[1.0]], requires_grad=True)
    with pytest.raises(NumericError, match="w7"):
        opt.apply("w7", t, np.array([[np.nan]]))


def test_adam_new_key_starts_from_zeroed_moments():
    opt = AdamState(lr=0.1)
    a = Tensor([[1.0]], requires_grad=True)
    b = Tensor([[1.0]], requires_grad=True)
    opt.apply("a", a, np.array([[1.0]]))
    opt.apply("a", a, np.array([[1.0]]))
    opt.apply("b", b, np.array([[1.0]]))
    assert opt.slots["b"][2] == 1
    assert opt.slots["b"][0][0, 0] == pytest.approx(0.1)  # (1 - beta1) * g


def test_adam_drop_missing():
    opt = AdamState(lr=0.1)
    t = Tensor([[1.0]], requires_grad=True)
    opt.apply(1, t, np.ones((1, 1)))
    opt.apply(2, t, np.ones((1, 1)))
    opt.drop_missing({1})
    assert set(opt.slots) == {1}


def test_weight_step_quadratic_descends_monotonically():
    state = ModelState(weights={0: Tensor([[1.0]], requires_grad=True)}, alphas={})
    opt = AdamState(lr=0.009)

    def loss_fn(batch):
        w = state.weights[0]
        return sum_all(hadamard(w, w))

    values = [state.weights[0].data[0, 0]]
    for _ in range(100):
        weight_step(state, opt, loss_fn, None)
        values.append(state.weights[0].data[0, 0])
    diffs = np.diff(values)
    assert np.all(diffs < 0)
    assert 0.0 < values[-1] < 0.3


def test_weight_step_is_bit_reproducible():
    spec, state = build_two_to_one(2, 3, m=2, seed=5)
    batch = make_batch(spec, np.random.default_rng(0))
    results = []
    for _ in range(2):
        s = clone_state(state)
        opt = AdamState(lr=0.01)
        weight_step(s, opt, lambda b: cell_loss(spec, s, b), batch)
        results.append(weight_bytes(s))
    assert results[0] == results[1]


def test_weight_step_leaves_alphas_untouched():
    spec, state = build_two_to_one(2, 3, m=2, seed=5)
    batch = make_batch(spec, np.random.default_rng(0))
    before = alpha_bytes(state)
    weight_step(state, AdamState(lr=0.01), lambda b: cell_loss(spec, state, b), batch)
    assert alpha_bytes(state) == before
    assert weight_bytes(state) != weight_bytes(clone_state(build_two_to_one(2, 3, m=2, seed=5)[1]))


# ---------------------------------------------------------------------------
# first-order logit step


def test_arch_step_symmetric_branches_get_equal_gradients():
    alpha = Tensor([[0.0, 0.0, 0.0]], requires_grad=True)
    f = Tensor([[1.0, 2.0]])

    with Tape() as tape:
        mix = weighted_sum(softmax(alpha), [f, f, f])
        loss = sum_all(hadamard(mix, mix))
    g = tape.backward(loss)[alpha.tid]
    assert g[0, 0] == g[0, 1] == g[0, 2]


def test_arch_step_gradient_matches_finite_differences():
    spec, state = build_two_to_one(2, 3, m=2, seed=3)
    batch = make_batch(spec, np.random.default_rng(1))

    with Tape() as tape:
        loss = cell_loss(spec, state, batch)
    grads = tape.backward(loss)

    from cellgrow.autodiff import numerical_gradient

    arrays = [state.alphas[eid].data for eid in sorted(state.alphas)]

    def f(_arrays):
        return float(cell_loss(spec, state, batch).data[0, 0])

    numeric = numerical_gradient(f, arrays)
    for (eid, num) in zip(sorted(state.alphas), numeric):
        got = grads[state.alphas[eid].tid]
        denom = max(np.abs(num).max(), 1e-8)
        assert np.abs(got - num).max() / denom < 1e-4


def test_arch_step_first_order_freezes_weights():
    spec, state = build_two_to_one(2, 3, m=2, seed=3)
    batch = make_batch(spec, np.random.default_rng(1))
    w_before = weight_bytes(state)
    a_before = alpha_bytes(state)
    arch_step_first_order(state, AdamState(lr=0.01), lambda b: cell_loss(spec, state, b), batch)
    assert weight_bytes(state) == w_before
    assert alpha_bytes(state) != a_before


# ---------------------------------------------------------------------------
# lookahead logit step


def test_second_order_with_zero_xi_equals_first_order_bitwise():
    spec, state = build_two_to_one(2, 3, m=2, seed=7)
    rng = np.random.default_rng(2)
    train_b = make_batch(spec, rng)
    val_b = make_batch(spec, rng)
    cfg = BilevelConfig(xi=0.0)

    s1 = clone_state(state)
    arch_step_first_order(s1, AdamState(lr=cfg.lr_alpha), lambda b: cell_loss(spec, s1, b), val_b)
    s2 = clone_state(state)
    arch_step_second_order(
        s2, AdamState(lr=cfg.lr_alpha), lambda b: cell_loss(spec, s2, b), train_b, val_b, cfg
    )
    assert alpha_bytes(s1) == alpha_bytes(s2)
    assert weight_bytes(s1) == weight_bytes(s2) == weight_bytes(state)


def test_quadratic_hypergradient_matches_closed_form():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 100:
        w0 = float(rng.uniform(-2.0, 2.0))
        a0 = float(rng.uniform(-2.0, 2.0))
        xi = float(rng.uniform(0.01, 0.5))
        w_prime = w0 - 2.0 * xi * (w0 - a0)
        expected = 4.0 * xi * w_prime
        if abs(expected) < 1e-3:
            continue
        state = quad_state(w0, a0)
        cfg = BilevelConfig(xi=xi)
        hyper, val_loss = second_order_hypergrad(state, quad_loss(state), "train", "val", cfg)
        got = hyper[0][0, 0]
        assert abs(got - expected) / abs(expected) < 1e-3
        assert val_loss == pytest.approx(w_prime**2, rel=1e-12)
        checked += 1


def test_second_order_restores_weights_bit_exactly():
    spec, state = build_two_to_one(2, 3, m=2, seed=9)
    rng = np.random.default_rng(4)
    train_b = make_batch(spec, rng)
    val_b = make_batch(spec, rng)
    before = weight_bytes(state)
    a_before = alpha_bytes(state)
    cfg = BilevelConfig()
    arch_step_second_order(
        state, AdamState(lr=cfg.lr_alpha), lambda b: cell_loss(spec, state, b), train_b, val_b, cfg
    )
    assert weight_bytes(state) == before
    assert alpha_bytes(state) != a_before


def test_zero_validation_weight_gradient_falls_back_to_first_order():
    state = quad_state(1.5, 0.25)

    def loss_fn(batch):
        w = state.weights[0]
        a = state.alphas[0]
        if batch == "train":
            d = sub(w, a)
            return sum_all(hadamard(d, d))
        return sum_all(hadamard(a, a))  # validation loss ignores the weights

    before = weight_bytes(state)
    cfg = BilevelConfig(xi=0.5)
    hyper, _ = second_order_hypergrad(state, loss_fn, "train", "val", cfg)
    assert hyper[0][0, 0] == pytest.approx(2.0 * 0.25, rel=1e-12)
    assert weight_bytes(state) == before


def test_arch_step_second_order_is_bit_reproducible():
    spec, state = build_two_to_one(2, 3, m=2, seed=13)
    rng = np.random.default_rng(6)
    train_b = make_batch(spec, rng)
    val_b = make_batch(spec, rng)
    outs = []
    for _ in range(2):
        s = clone_state(state)
        arch_step_second_order(
            s, AdamState(lr=0.0003), lambda b: cell_loss(spec, s, b), train_b, val_b, BilevelConfig()
        )
        outs.append(alpha_bytes(s))
    assert outs[0] == outs[1]


def test_arch_step_dispatches_on_order():
    spec, state = build_two_to_one(2, 3, m=2, seed=13)
    rng = np.random.default_rng(6)
    train_b = make_batch(spec, rng)
    val_b = make_batch(spec, rng)

    first = clone_state(state)
    arch_step(
        first,
        AdamState(lr=0.0003),
        lambda b: cell_loss(spec, first, b),
        train_b,
        val_b,
        BilevelConfig(order="first"),
    )
    plain = clone_state(state)
    arch_step_first_order(
        plain, AdamState(lr=0.0003), lambda b: cell_loss(spec, plain, b), val_b
    )
    assert alpha_bytes(first) == alpha_bytes(plain)

    second = clone_state(state)
    arch_step(
        second,
        AdamState(lr=0.0003),
        lambda b: cell_loss(spec, second, b),
        train_b,
        val_b,
        BilevelConfig(),
    )
    assert alpha_bytes(second) != alpha_bytes(plain)


# ---------------------------------------------------------------------------
# training stages


def test_train_stage_patience_one_stops_after_two_epochs():
    task = QuadTask(scripted_val=[1.0, 2.0, 3.0, 4.0])
    state = quad_state(1.0, 0.0)
    _, history = train_stage(
        None, state, task, EarlyStop(patience=1, max_epochs=10), update_alphas=False
    )
    assert len(history) == 2
    assert [r.epoch for r in history] == [1, 2]


def test_train_stage_respects_max_epochs():
    task = QuadTask(scripted_val=[float(v) for v in range(100, 0, -1)])
    state = quad_state(1.0, 0.0)
    _, history = train_stage(
        None, state, task, EarlyStop(patience=10, max_epochs=3), update_alphas=False
    )
    assert len(history) == 3


def test_train_stage_frozen_alphas_convex_val_non_increasing():
    task = QuadTask()
    state = quad_state(1.0, 0.0)
    best, history = train_stage(
        None,
        state,
        task,
        EarlyStop(patience=5, max_epochs=30),
        BilevelConfig(lr_w=0.02),
        update_alphas=False,
    )
    vals = [r.val_loss for r in history]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert alpha_bytes(best) == alpha_bytes(state)
    # the caller's state is never trained in place
    assert state.weights[0].data[0, 0] == 1.0


def test_train_stage_returns_best_epoch_snapshot():
    task = QuadTask(scripted_val=[3.0, 1.0, 2.0, 4.0])
    state = quad_state(1.0, 0.0)
    seen = []
    inner = task.loss

    def spy(spec, st, batch):
        seen.append(st.weights[0].data.tobytes())
        return inner(spec, st, batch)

    task.loss = spy
    best, history = train_stage(
        None, state, task, EarlyStop(patience=2, max_epochs=10), update_alphas=False
    )
    assert len(history) == 4
    # loss call k sees the weights after k-1 updates; best epoch is 2
    assert best.weights[0].data.tobytes() == seen[2]
    assert best.weights[0].data.tobytes() != seen[3]


def test_train_stage_deterministic_metric_stream():
    spec, state = build_two_to_one(2, 3, m=2, seed=21)
    task = TinyCellTask(spec, seed=3)
    runs = []
    for _ in range(2):
        best, history = train_stage(
            spec, state, task, EarlyStop(patience=2, max_epochs=4), BilevelConfig(lr_w=0.01)
        )
        rows = [
            (r.trial, r.backbone, r.mode, r.stage, r.epoch, r.train_loss, r.val_loss,
             r.node_count, r.param_count, r.event)
            for r in history
        ]
        runs.append((rows, weight_bytes(best), alpha_bytes(best)))
    assert runs[0] == runs[1]
    rows = runs[0][0]
    assert rows[0][1] == "two_to_one"
    assert rows[0][4] == 1
    assert rows[0][8] == inventory(spec, state)
    assert rows[0][7] == spec.node_count


def test_train_stage_trains_the_quadratic_to_its_target():
    # full dynamics: weights chase alpha on train, alpha feels val loss
    task = QuadTask()
    state = quad_state(1.0, 0.8)
    best, history = train_stage(
        None,
        state,
        task,
        EarlyStop(patience=3, max_epochs=60),
        BilevelConfig(lr_w=0.05, lr_alpha=0.05),
    )
    assert history[-1].val_loss < history[0].val_loss


def test_train_stage_empty_train_stream_raises():
    task = QuadTask()
    task.train_batches = lambda: []
    with pytest.raises(ValueError, match="training stream"):
        train_stage(None, quad_state(1.0, 0.0), task, EarlyStop(), update_alphas=False)


def test_train_stage_empty_val_stream_raises_when_dynamic():
    task = QuadTask()
    task.val_batches = lambda: []
    with pytest.raises(ValueError, match="validation stream"):
        train_stage(None, quad_state(1.0, 0.0), task, EarlyStop())
