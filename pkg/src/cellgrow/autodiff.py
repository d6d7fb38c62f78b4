"""Reverse-mode automatic differentiation on dense 2-D float64 matrices.

Small tape-based engine: every primitive computes its forward value eagerly
and, when a Tape is active and an input requires gradients, appends a record
with the local backward rule. Replaying the records in reverse creation order
is a reverse topological walk of the computation graph, so a single pass
accumulates exact total derivatives.

Scope is deliberately narrow: matrices only (rows, cols), float64 only, no
broadcasting beyond row-vector bias addition. Any NaN or Inf produced by a
primitive raises NumericError immediately rather than propagating.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "NumericError",
    "Tensor",
    "Tape",
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
    "numerical_gradient",
]


class NumericError(RuntimeError):
    """A primitive produced NaN or Inf, or was fed non-finite data."""


_ids = itertools.count(1)


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"tensors are 2-D matrices, got shape {arr.shape}")
    return arr


class Tensor:
    """A dense float64 matrix with an identity the tape can track."""

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, value, requires_grad: bool = False):
        self.data = _as_matrix(value)
        if not np.all(np.isfinite(self.data)):
            raise NumericError("tensor holds non-finite entries")
        self.requires_grad = bool(requires_grad)
        self.tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


# Active tapes. The innermost tape records; nesting is allowed but the
# engine only ever needs one level in practice.
_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications plus accumulated gradients."""

    def __init__(self):
        # each record: (out_tid, parents, backward_fn)
        # backward_fn(out_grad) -> list of grads aligned with parents (None allowed)
        self.records = []
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(root)/d(tensor) for every tensor reachable from root.

        root must be 1x1. Returns the gradient map keyed by tensor id; the
        same map is kept on the tape as .grads.
        """
        if root.shape != (1, 1):
            raise ValueError(f"backward root must be 1x1, got {root.shape}")
        grads: dict[int, np.ndarray] = {root.tid: np.ones((1, 1))}
        for out_tid, parents, backward_fn in reversed(self.records):
            out_grad = grads.get(out_tid)
            if out_grad is None:
                continue
            parent_grads = backward_fn(out_grad)
            for parent, pgrad in zip(parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pgrad)):
                    raise NumericError("backward produced non-finite gradient")
                slot = grads.get(parent.tid)
                if slot is None:
                    # copy: rules may hand back the upstream array itself
                    grads[parent.tid] = np.array(pgrad, dtype=np.float64)
                else:
                    slot += pgrad
        self.grads = grads
        return grads


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _emit(value: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap a forward result, recording the backward rule if needed."""
    if not np.all(np.isfinite(value)):
        raise NumericError("primitive produced non-finite values")
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = track
    out.tid = next(_ids)
    if track:
        tape.records.append((out.tid, tuple(parents), backward_fn))
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    value = a.data @ b.data

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _emit(value, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "hadamard")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def add_bias(m: Tensor, bias: Tensor) -> Tensor:
    """Row-vector bias addition, the one permitted broadcast: (B,n) + (1,n)."""
    if bias.shape[0] != 1 or bias.shape[1] != m.shape[1]:
        raise ValueError(f"add_bias: bias {bias.shape} does not fit {m.shape}")
    return _emit(m.data + bias.data, (m, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _emit(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    # Convention: derivative at exactly 0 is 0.
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by max subtraction."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), backward)


def _neumaier_sum(terms: list[np.ndarray]) -> np.ndarray:
    """Compensated elementwise sum of equally shaped arrays.

    Keeps a running error term so the result matches the exactly rounded sum
    for the term counts seen here. This is what makes replacing one term t by
    two t/2 halves leave downstream bits unchanged.
    """
    total = terms[0].copy()
    comp = np.zeros_like(total)
    for term in terms[1:]:
        new = total + term
        big = np.abs(total) >= np.abs(term)
        comp += np.where(big, (total - new) + term, (term - new) + total)
        total = new
    return total + comp


def weighted_sum(weights: Tensor, terms: list[Tensor]) -> Tensor:
    """Mixture sum(w_k * T_k) over equally shaped terms, w a (1,k) row.

    Fused so the accumulation can be compensated; gradients are the obvious
    ones (w_k into each term, sum(g*T_k) into each weight).
    """
    k = len(terms)
    if weights.shape != (1, k):
        raise ValueError(f"weighted_sum: weights {weights.shape} for {k} terms")
    base = terms[0].shape
    for t in terms[1:]:
        if t.shape != base:
            raise ValueError("weighted_sum: term shapes differ")
    w = weights.data[0]
    value = _neumaier_sum([w[i] * terms[i].data for i in range(k)])

    def backward(g):
        wgrad = np.array([[float((g * t.data).sum()) for t in terms]])
        return (wgrad, *[w[i] * g for i in range(k)])

    return _emit(value, (weights, *terms), backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    na = a.shape[1]
    value = np.concatenate([a.data, b.data], axis=1)
    return _emit(value, (a, b), lambda g: (g[:, :na], g[:, na:]))


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a table by integer index (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError("take_rows: index out of range")
    value = table.data[idx]

    def backward(g):
        tg = np.zeros_like(table.data)
        np.add.at(tg, idx, g)
        return (tg,)

    return _emit(value, (table,), backward)


def sum_all(a: Tensor) -> Tensor:
    value = np.array([[a.data.sum()]])
    return _emit(value, (a,), lambda g: (np.full_like(a.data, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    value = np.array([[a.data.sum() / n]])
    return _emit(value, (a,), lambda g: (np.full_like(a.data, g[0, 0] / n),))


def mse(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all entries, returned as a 1x1 tensor."""
    _require_same_shape(prediction, target, "mse")
    diff = prediction.data - target.data
    n = diff.size
    value = np.array([[(diff * diff).sum() / n]])

    def backward(g):
        base = (2.0 / n) * diff * g[0, 0]
        return (base, -base)

    return _emit(value, (prediction, target), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row-wise softmax."""
    idx = np.asarray(targets, dtype=np.int64).ravel()
    rows, classes = logits.shape
    if idx.shape[0] != rows:
        raise ValueError(f"cross_entropy: {rows} rows but {idx.shape[0]} targets")
    if idx.size and (idx.min() < 0 or idx.max() >= classes):
        raise ValueError("cross_entropy: target class out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    value = np.array([[-logp[np.arange(rows), idx].mean()]])

    def backward(g):
        p = np.exp(logp)
        p[np.arange(rows), idx] -= 1.0
        return (p * (g[0, 0] / rows),)

    return _emit(value, (logits,), backward)


def numerical_gradient(f, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function of several arrays.

    The independent oracle used throughout the tests: f takes the list of
    arrays and returns a python float; every entry is perturbed in turn.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f(arrays)
            flat[i] = keep - h
            down = f(arrays)
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads
