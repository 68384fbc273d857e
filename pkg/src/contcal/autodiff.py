"""Dense-matrix reverse-mode automatic differentiation on float64 arrays.

Every value in the graph is a 2-D matrix; scalars are 1x1. The graph is
dynamic: each forward pass rebuilds it from scratch by linking result nodes
to their operands, and `backward` replays the recorded operations in reverse
topological order exactly once. Gradients accumulate across backward calls
until `zero_grads` is invoked, so multi-term losses compose by summing
scalar nodes and calling backward once on the total.

Only the primitives needed by the training and calibration losses are
provided. Broadcasting is restricted to row-bias addition; every other
shape mismatch raises ShapeError.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, UsageError

_param_ids = itertools.count()


class Matrix:
    """A node in the computation graph holding a 2-D float64 array.

    Leaves created from raw data do not require gradients unless they are
    Params. Result nodes remember their operands and a closure that pushes
    the upstream gradient into them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Matrix, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise UsageError(f"item() requires a 1x1 matrix, got {self.data.shape}")
        return float(self.data[0, 0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Matrix(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Param(Matrix):
    """A trainable leaf: persistent value, persistent gradient, unique id."""

    __slots__ = ("id", "_adam_m", "_adam_v")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.id = next(_param_ids)
        self._adam_m: np.ndarray | None = None
        self._adam_v: np.ndarray | None = None

    def __repr__(self) -> str:
        return f"Param(id={self.id}, shape={self.data.shape})"


def _result(data: np.ndarray, parents: tuple[Matrix, ...],
            backward_fn: Callable[[np.ndarray], None]) -> Matrix:
    out = Matrix(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(node: Matrix, delta: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += delta


def backward(loss: Matrix) -> None:
    """Populate gradients of every Param reachable from `loss`.

    The loss must be scalar (1x1). Gradients accumulate; call `zero_grads`
    between optimization steps.
    """
    if loss.shape != (1, 1):
        raise UsageError(f"backward requires a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return

    # Iterative post-order walk; each node visited exactly once.
    order: list[Matrix] = []
    visited: set[int] = set()
    stack: list[tuple[Matrix, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += 1.0
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


def zero_grads(params: Iterable[Matrix]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad.fill(0.0)


# ---------------------------------------------------------------------------
# Differentiable primitives
# ---------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product a @ b."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(out_data, (a, b), bw)


def transpose(a: Matrix) -> Matrix:
    def bw(g: np.ndarray) -> None:
        _accumulate(a, g.T)

    return _result(a.data.T.copy(), (a,), bw)


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), bw)


def add_row_bias(a: Matrix, bias: Matrix) -> Matrix:
    """Add a 1xC bias row to every row of a (the only broadcast allowed)."""
    if bias.rows != 1 or bias.cols != a.cols:
        raise ShapeError(f"add_row_bias: bias {bias.shape} does not fit {a.shape}")

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(bias, g.sum(axis=0, keepdims=True))

    return _result(a.data + bias.data, (a, bias), bw)


def scale(a: Matrix, c: float) -> Matrix:
    """Multiply by a Python constant (no gradient for c)."""

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), bw)


def div_by_scalar(a: Matrix, t: Matrix) -> Matrix:
    """Divide every entry by a 1x1 node (temperature-style scaling)."""
    if t.shape != (1, 1):
        raise ShapeError(f"div_by_scalar: divisor must be 1x1, got {t.shape}")
    tv = t.data[0, 0]
    out_data = a.data / tv

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g / tv)
        if t.requires_grad:
            _accumulate(t, np.array([[-(g * a.data).sum() / (tv * tv)]]))

    return _result(out_data, (a, t), bw)


def relu(a: Matrix) -> Matrix:
    mask = a.data > 0.0

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * mask)

    return _result(np.maximum(a.data, 0.0), (a,), bw)


def softmax_rows(z: Matrix) -> Matrix:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)

    def bw(g: np.ndarray) -> None:
        inner = (g * probs).sum(axis=1, keepdims=True)
        _accumulate(z, probs * (g - inner))

    return _result(probs, (z,), bw)


def log_softmax_rows(z: Matrix) -> Matrix:
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    probs = np.exp(logp)

    def bw(g: np.ndarray) -> None:
        _accumulate(z, g - probs * g.sum(axis=1, keepdims=True))

    return _result(logp, (z,), bw)


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    return labels


def nll(logp: Matrix, labels: Sequence[int]) -> Matrix:
    """Mean negative log likelihood of the labelled entries of log-probabilities."""
    y = _check_labels(np.asarray(labels), logp.cols)
    if y.size != logp.rows:
        raise ShapeError(f"nll: {logp.rows} rows but {y.size} labels")
    n = logp.rows
    picked = logp.data[np.arange(n), y]
    out_data = np.array([[-picked.mean()]])

    def bw(g: np.ndarray) -> None:
        delta = np.zeros_like(logp.data)
        delta[np.arange(n), y] = -g[0, 0] / n
        _accumulate(logp, delta)

    return _result(out_data, (logp,), bw)


def cross_entropy(logits: Matrix, labels: Sequence[int]) -> Matrix:
    """Mean cross-entropy over rows; exactly nll(log_softmax_rows(z), y)."""
    return nll(log_softmax_rows(logits), labels)


def entropy_rows(probs: Matrix) -> Matrix:
    """Mean Shannon entropy of probability rows, with 0*log(0) := 0."""
    sums = probs.data.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        worst = float(np.abs(sums - 1.0).max())
        raise DomainError(f"entropy_rows: rows must sum to 1 within 1e-6 "
                          f"(worst deviation {worst:.3e})")
    p = probs.data
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    n = probs.rows
    out_data = np.array([[-plogp.sum() / n]])

    def bw(g: np.ndarray) -> None:
        dH = np.where(p > 0.0, -(np.log(np.where(p > 0.0, p, 1.0)) + 1.0), 0.0)
        _accumulate(probs, g[0, 0] * dH / n)

    return _result(out_data, (probs,), bw)


def mean_sq_l2(a: Matrix, b: Matrix) -> Matrix:
    """Mean over rows of the squared Euclidean distance between paired rows."""
    if a.shape != b.shape:
        raise ShapeError(f"mean_sq_l2: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = a.rows
    out_data = np.array([[(diff * diff).sum() / n]])

    def bw(g: np.ndarray) -> None:
        d = g[0, 0] * 2.0 * diff / n
        if a.requires_grad:
            _accumulate(a, d)
        if b.requires_grad:
            _accumulate(b, -d)

    return _result(out_data, (a, b), bw)


def sum_all(a: Matrix) -> Matrix:
    def bw(g: np.ndarray) -> None:
        _accumulate(a, np.full_like(a.data, g[0, 0]))

    return _result(np.array([[a.data.sum()]]), (a,), bw)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def sgd_step(params: Iterable[Param], lr: float) -> None:
    """value <- value - lr * grad. Grads are left untouched; zeroing is explicit."""
    if lr <= 0.0:
        raise ConfigError(f"sgd_step: lr must be positive, got {lr}")
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


def adam_step(params: Iterable[Param], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, t: int = 1) -> None:
    """Bias-corrected Adam update; moment state lives on each Param."""
    if lr <= 0.0:
        raise ConfigError(f"adam_step: lr must be positive, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ConfigError(f"adam_step: betas must lie in [0, 1), got {beta1}, {beta2}")
    if eps <= 0.0:
        raise ConfigError(f"adam_step: eps must be positive, got {eps}")
    if t < 1:
        raise ConfigError(f"adam_step: step counter must be >= 1, got {t}")
    for p in params:
        if p.grad is None:
            continue
        if p._adam_m is None:
            p._adam_m = np.zeros_like(p.data)
            p._adam_v = np.zeros_like(p.data)
        p._adam_m = beta1 * p._adam_m + (1.0 - beta1) * p.grad
        p._adam_v = beta2 * p._adam_v + (1.0 - beta2) * (p.grad * p.grad)
        m_hat = p._adam_m / (1.0 - beta1 ** t)
        v_hat = p._adam_v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
