"""Accuracy, NLL, reliability diagrams, and expected calibration error.

Predictions are binned by confidence into K equal-width bins. The first bin
is closed on both ends, [0, 1/K]; every later bin is half-open, (b/K,
(b+1)/K]. ECE is the bin-count-weighted mean absolute gap between average
accuracy and average confidence; empty bins contribute zero.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .data import Stream
from .errors import DomainError, UsageError
from .models import CalibratedModel, predict


@dataclass
class BinStat:
    lo: float
    hi: float
    count: int = 0
    sum_confidence: float = 0.0
    sum_correct: float = 0.0


@dataclass
class ReliabilityDiagram:
    k: int
    bins: list[BinStat]

    @property
    def total(self) -> int:
        return sum(b.count for b in self.bins)


@dataclass
class EceReport:
    ece: float
    total: int
    # per bin: (average accuracy, average confidence, weight); zeros when empty
    per_bin: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def percent(self) -> float:
        return 100.0 * self.ece


def bin_index(confidence: float, k: int) -> int:
    """Smallest b with confidence <= (b+1)/k; the first bin absorbs zero.

    Comparing against the b/k edge values directly (rather than multiplying
    by k) keeps boundary confidences like 0.9 in their closed-upper-edge bin.
    """
    edges = [(b + 1) / k for b in range(k)]
    return min(bisect.bisect_left(edges, confidence), k - 1)


def accuracy(predicted, labels) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape:
        raise UsageError(
            f"accuracy: {predicted.shape} predictions vs {labels.shape} labels")
    if predicted.size == 0:
        raise UsageError("accuracy: empty prediction list")
    return float((predicted == labels).mean())


def build_reliability(confidences, correct, k: int = 10) -> ReliabilityDiagram:
    confidences = np.asarray(confidences, dtype=np.float64).reshape(-1)
    correct = np.asarray(correct).reshape(-1)
    if confidences.shape != correct.shape:
        raise UsageError(f"{confidences.size} confidences vs {correct.size} flags")
    if confidences.size and (confidences.min() < 0.0 or confidences.max() > 1.0):
        raise DomainError(
            f"confidence outside [0, 1]: range "
            f"[{confidences.min()}, {confidences.max()}]")
    bins = [BinStat(lo=b / k, hi=(b + 1) / k) for b in range(k)]
    for c, ok in zip(confidences, correct):
        b = bins[bin_index(float(c), k)]
        b.count += 1
        b.sum_confidence += float(c)
        b.sum_correct += float(bool(ok))
    return ReliabilityDiagram(k, bins)


def merge_diagrams(a: ReliabilityDiagram, b: ReliabilityDiagram) -> ReliabilityDiagram:
    if a.k != b.k:
        raise UsageError(f"cannot merge diagrams with {a.k} and {b.k} bins")
    merged = []
    for x, y in zip(a.bins, b.bins):
        merged.append(BinStat(x.lo, x.hi, x.count + y.count,
                              x.sum_confidence + y.sum_confidence,
                              x.sum_correct + y.sum_correct))
    return ReliabilityDiagram(a.k, merged)


def ece(d: ReliabilityDiagram) -> EceReport:
    m = d.total
    if m == 0:
        raise UsageError("ece: diagram holds no predictions")
    total = 0.0
    per_bin = []
    for b in d.bins:
        if b.count == 0:
            per_bin.append((0.0, 0.0, 0.0))
            continue
        avg_acc = b.sum_correct / b.count
        avg_conf = b.sum_confidence / b.count
        weight = b.count / m
        total += weight * abs(avg_acc - avg_conf)
        per_bin.append((avg_acc, avg_conf, weight))
    return EceReport(ece=total, total=m, per_bin=per_bin)


def nll_from_logits(logits: np.ndarray, labels) -> float:
    """Mean negative log likelihood, computed stably from raw logits."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float((lse - shifted[np.arange(len(labels)), labels]).mean())


@dataclass
class EvalResult:
    accuracy: float
    ece: float
    nll: float
    n: int
    diagram: ReliabilityDiagram


@dataclass
class StreamEval:
    per_experience: list[EvalResult]
    aggregate: EvalResult


def evaluate_dataset(cm: CalibratedModel, inputs, labels, k: int = 10) -> EvalResult:
    out = predict(cm, inputs)
    correct = out.predicted == np.asarray(labels)
    diagram = build_reliability(out.confidence, correct, k)
    return EvalResult(
        accuracy=accuracy(out.predicted, labels),
        ece=ece(diagram).ece,
        nll=nll_from_logits(out.logits, labels),
        n=len(labels),
        diagram=diagram)


def evaluate_stream(cm: CalibratedModel, stream: Stream, k: int = 10) -> StreamEval:
    """Per-experience test metrics plus pooled metrics over all test sets."""
    per_exp = []
    all_conf, all_correct, all_nll_terms = [], [], []
    for exp in stream.experiences:
        out = predict(cm, exp.test.inputs)
        correct = out.predicted == exp.test.labels
        diagram = build_reliability(out.confidence, correct, k)
        per_exp.append(EvalResult(
            accuracy=accuracy(out.predicted, exp.test.labels),
            ece=ece(diagram).ece,
            nll=nll_from_logits(out.logits, exp.test.labels),
            n=len(exp.test),
            diagram=diagram))
        all_conf.append(out.confidence)
        all_correct.append(correct)
        all_nll_terms.append(nll_from_logits(out.logits, exp.test.labels) * len(exp.test))
    conf = np.concatenate(all_conf)
    correct = np.concatenate(all_correct)
    diagram = build_reliability(conf, correct, k)
    total = len(conf)
    aggregate = EvalResult(
        accuracy=float(correct.mean()),
        ece=ece(diagram).ece,
        nll=sum(all_nll_terms) / total,
        n=total,
        diagram=diagram)
    return StreamEval(per_exp, aggregate)


def reliability_csv_rows(d: ReliabilityDiagram) -> list[str]:
    """Fixed-width rows: bin_lo, bin_hi, count, avg_confidence, avg_accuracy."""
    rows = ["bin_lo,bin_hi,count,avg_confidence,avg_accuracy"]
    for b in d.bins:
        avg_conf = b.sum_confidence / b.count if b.count else 0.0
        avg_acc = b.sum_correct / b.count if b.count else 0.0
        rows.append(f"{b.lo:.6f},{b.hi:.6f},{b.count},{avg_conf:.6f},{avg_acc:.6f}")
    return rows


def write_reliability_csv(path: str, d: ReliabilityDiagram) -> None:
    with open(path, "w") as f:
        f.write("\n".join(reliability_csv_rows(d)) + "\n")
