"""Continual training loops: naive finetuning, experience replay, DER++, joint.

Replay keeps a reservoir-sampled buffer of past (input, label) pairs and
trains on current and replayed examples as one batch. DER++ additionally
stores the model's output logits at insertion time and distills against
them; its two memory terms draw independent samples. Entropy regularization
is an additive loss term available to every strategy; it covers every batch
the model trains on in a step, memory batches included.

Gradient zeroing is explicit and owned by the loop; optimizers never zero,
so the multi-term losses stay composable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Matrix
from .data import Experience, LabeledDataset, SeededRng, Stream, concat_datasets, minibatches
from .errors import ConfigError, UsageError
from .models import CalibratedModel

STRATEGY_KINDS = ("naive", "replay", "derpp", "joint")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class BufferItem:
    x: np.ndarray
    y: int
    z: np.ndarray | None = None   # stored logits (DER++ only)
    exp_id: int = -1
    role: str = ""


class ReservoirBuffer:
    """Capacity-bounded uniform sample of a stream (Vitter's algorithm R).

    The first `capacity` offers are kept; offer number n+1 then replaces a
    uniformly chosen slot with probability capacity/(n+1). Every offer
    increments `seen` whether or not it is retained.
    """

    def __init__(self, capacity: int, rng: SeededRng):
        if capacity < 0:
            raise ConfigError(f"buffer capacity must be nonnegative, got {capacity}")
        self.capacity = capacity
        self.rng = rng
        self.items: list[BufferItem] = []
        self.seen = 0

    def __len__(self) -> int:
        return len(self.items)

    def insert(self, item) -> None:
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            j = int(self.rng.gen.integers(0, self.seen + 1))
            if j < self.capacity:
                self.items[j] = item
        self.seen += 1

    def sample(self, k: int) -> list:
        """k items uniform with replacement; empty buffer yields an empty batch."""
        if not self.items or k == 0:
            return []
        idx = self.rng.gen.integers(0, len(self.items), size=k)
        return [self.items[i] for i in idx]


@dataclass
class StrategyConfig:
    kind: str = "naive"
    alpha: float = 0.3
    beta: float = 0.8
    memory_size: int = 2000
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "sgd"

    def validate(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}; "
                              f"expected one of {STRATEGY_KINDS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if self.kind in ("replay", "derpp") and self.memory_size < 1:
            raise ConfigError(f"{self.kind} needs a positive memory_size")

    def uses_buffer(self) -> bool:
        return self.kind in ("replay", "derpp")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    term_means: dict[str, float] = field(default_factory=dict)
    steps: int = 0
    wall_time: float = 0.0

    @property
    def mean_loss(self) -> float:
        return sum(self.epoch_losses) / len(self.epoch_losses)


class SgdOptimizer:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params) -> None:
        ad.sgd_step(params, self.lr)


class AdamOptimizer:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self, params) -> None:
        self.t += 1
        ad.adam_step(params, self.lr, self.beta1, self.beta2, self.eps, self.t)


def make_optimizer(cfg: StrategyConfig):
    if cfg.optimizer == "adam":
        return AdamOptimizer(cfg.lr)
    return SgdOptimizer(cfg.lr)


def _entropy_over_segments(segments: list[tuple[Matrix, int]]) -> Matrix:
    """Row-weighted mean entropy of the softmax of several logit nodes."""
    total_rows = sum(n for _, n in segments)
    acc = None
    for z, n in segments:
        h = ad.scale(ad.entropy_rows(ad.softmax_rows(z)), n / total_rows)
        acc = h if acc is None else ad.add(acc, h)
    return acc


def _step_loss(cm: CalibratedModel, xb: np.ndarray, yb: np.ndarray,
               cfg: StrategyConfig, hr_lambda: float | None,
               buf: ReservoirBuffer | None):
    """Build the loss graph for one minibatch; returns (loss, term values)."""
    terms: dict[str, float] = {}
    segments: list[tuple[Matrix, int]] = []

    if cfg.kind == "replay" and buf is not None and len(buf) > 0:
        mem = buf.sample(len(yb))
        xb = np.concatenate([xb, np.stack([it.x for it in mem])])
        yb = np.concatenate([yb, np.array([it.y for it in mem], dtype=np.int64)])

    z = cm.logits(xb)
    loss = ad.cross_entropy(z, yb)
    terms["ce"] = loss.item()
    segments.append((z, len(yb)))

    if cfg.kind == "derpp" and buf is not None and len(buf) > 0:
        mem1 = buf.sample(len(yb))
        x1 = np.stack([it.x for it in mem1])
        stored = Matrix(np.stack([it.z for it in mem1]))
        z1 = cm.logits(x1)
        distill = ad.scale(ad.mean_sq_l2(stored, z1), cfg.alpha)
        terms["distill_alpha"] = distill.item()
        loss = ad.add(loss, distill)
        segments.append((z1, len(mem1)))

        mem2 = buf.sample(len(yb))
        x2 = np.stack([it.x for it in mem2])
        y2 = np.array([it.y for it in mem2], dtype=np.int64)
        z2 = cm.logits(x2)
        ce_mem = ad.scale(ad.cross_entropy(z2, y2), cfg.beta)
        terms["ce_beta"] = ce_mem.item()
        loss = ad.add(loss, ce_mem)
        segments.append((z2, len(mem2)))

    if hr_lambda is not None:
        hr = ad.scale(_entropy_over_segments(segments), -hr_lambda)
        terms["hr"] = hr.item()
        loss = ad.add(loss, hr)

    return loss, terms


def _train_on_dataset(cm: CalibratedModel, ds: LabeledDataset, cfg: StrategyConfig,
                      hr_lambda: float | None, buf: ReservoirBuffer | None,
                      rng: SeededRng, optimizer, exp_id: int) -> TrainReport:
    started = time.perf_counter()
    report = TrainReport()
    term_sums: dict[str, float] = {}
    params = cm.params()
    for epoch in range(cfg.epochs):
        epoch_total, epoch_steps = 0.0, 0
        for xb, yb in minibatches(ds, cfg.batch_size, rng.child(epoch)):
            ad.zero_grads(params)
            loss, terms = _step_loss(cm, xb, yb, cfg, hr_lambda, buf)
            loss.backward()
            cm.head.mask_grads()
            optimizer.step(params)
            cm.head.project()

            if buf is not None:
                # current-experience rows only; DER++ snapshots post-step logits
                z_now = cm.logits(xb).data if cfg.kind == "derpp" else None
                for i in range(len(yb)):
                    buf.insert(BufferItem(
                        x=xb[i], y=int(yb[i]),
                        z=None if z_now is None else z_now[i],
                        exp_id=exp_id, role="train"))

            epoch_total += loss.item()
            epoch_steps += 1
            report.steps += 1
            for k, v in terms.items():
                term_sums[k] = term_sums.get(k, 0.0) + v
        report.epoch_losses.append(epoch_total / epoch_steps)
    report.term_means = {k: v / report.steps for k, v in term_sums.items()}
    report.wall_time = time.perf_counter() - started
    return report


def train_experience(cm: CalibratedModel, exp: Experience, cfg: StrategyConfig,
                     hr_lambda: float | None = None,
                     buf: ReservoirBuffer | None = None,
                     rng: SeededRng | None = None,
                     optimizer=None) -> TrainReport:
    """Train the model on one experience under the configured strategy."""
    cfg.validate()
    if cfg.kind == "joint":
        raise UsageError("joint training runs through train_joint, not per-experience")
    if len(exp.train) == 0:
        raise UsageError(f"experience {exp.id} has no training data")
    if exp.train.role != "train":
        raise UsageError(
            f"refusing to train on data tagged {exp.train.role!r} (test-set protection)")
    if cfg.uses_buffer() != (buf is not None):
        raise UsageError(
            f"strategy {cfg.kind!r} {'requires' if cfg.uses_buffer() else 'does not take'}"
            " a replay buffer")
    if rng is None:
        rng = SeededRng(0, tags=(exp.id,))
    if optimizer is None:
        optimizer = make_optimizer(cfg)
    inserted_buf = buf if cfg.uses_buffer() else None
    return _train_on_dataset(cm, exp.train, cfg, hr_lambda, inserted_buf,
                             rng, optimizer, exp.id)


def train_joint(cm: CalibratedModel, stream: Stream, cfg: StrategyConfig,
                hr_lambda: float | None = None,
                rng: SeededRng | None = None,
                optimizer=None) -> TrainReport:
    """Offline baseline: one run over the concatenation of all train sets."""
    cfg.validate()
    if len(stream.experiences) == 0:
        raise UsageError("cannot train jointly on an empty stream")
    for exp in stream.experiences:
        if exp.train.role != "train":
            raise UsageError(
                f"refusing to train on data tagged {exp.train.role!r} (test-set protection)")
    pool = concat_datasets([e.train for e in stream.experiences], role="train")
    if rng is None:
        rng = SeededRng(0, tags=(0,))
    if optimizer is None:
        optimizer = make_optimizer(cfg)
    return _train_on_dataset(cm, pool, cfg, hr_lambda, None, rng, optimizer, -1)
