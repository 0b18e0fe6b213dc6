"""Closed-set accuracy, known-vs-unknown AUROC, and OSCR.

Each ranking metric ships in two forms: a fast sort-based path used by the
protocol, and an O(n^2) brute-force oracle retained as the reference the
fast path is tested against. The knownness score is the scalar used to rank
instances as known vs unknown; the default is the maximum cosine to the
active prototypes, which ignores the temperature entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .etf import PrototypeBank

SCORE_RULES = ("max_cosine", "max_softmax")


class EmptySideError(ValueError):
    """A metric over known vs unknown needs both sides non-empty."""


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm feature for instance {int(zero[0])}")
    return x / norms[:, None]


def active_cosines(features: np.ndarray, bank: PrototypeBank) -> tuple[np.ndarray, list[int]]:
    """Cosines of each feature against each active prototype, plus label order."""
    labels = bank.active_labels()
    if not labels:
        raise ValueError("no active prototypes")
    cols = [bank.assignment[lbl] for lbl in labels]
    z = _normalize_rows(np.atleast_2d(features))
    return z @ bank.matrix[:, cols], labels


def predict(features: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Argmax class over active prototypes only."""
    cos, labels = active_cosines(features, bank)
    return np.asarray(labels)[np.argmax(cos, axis=1)]


def knownness_score(features: np.ndarray, bank: PrototypeBank, rule: str = "max_cosine", eta: float = 1.0) -> np.ndarray:
    """Higher = more known. ``max_cosine`` is temperature-free; ``max_softmax``
    is the peak softmax probability over active prototypes at temperature eta."""
    cos, _ = active_cosines(features, bank)
    if rule == "max_cosine":
        return cos.max(axis=1)
    if rule == "max_softmax":
        logits = eta * cos
        peak = logits.max(axis=1, keepdims=True)
        ex = np.exp(logits - peak)
        return (ex / ex.sum(axis=1, keepdims=True)).max(axis=1)
    raise ValueError(f"unknown score rule {rule!r}; choose from {SCORE_RULES}")


def accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.size == 0:
        raise EmptySideError("accuracy of an empty prediction set")
    return float(np.mean(predicted == truth))


def auroc(known_scores, unknown_scores) -> float:
    """P(known > unknown) + 0.5 P(tie), via mid-rank ties."""
    k = np.asarray(known_scores, dtype=np.float64)
    u = np.asarray(unknown_scores, dtype=np.float64)
    if k.size == 0 or u.size == 0:
        raise EmptySideError("auroc needs non-empty known and unknown sides")
    combined = np.concatenate([k, u])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size, dtype=np.float64)
    ranks[order] = np.arange(1, combined.size + 1)
    # average ranks across ties
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum = ranks[: k.size].sum()
    return float((rank_sum - k.size * (k.size + 1) / 2.0) / (k.size * u.size))


def auroc_bruteforce(known_scores, unknown_scores) -> float:
    """O(n^2) pairwise oracle: wins + half-ties over all pairs."""
    k = np.asarray(known_scores, dtype=np.float64)
    u = np.asarray(unknown_scores, dtype=np.float64)
    if k.size == 0 or u.size == 0:
        raise EmptySideError("auroc needs non-empty known and unknown sides")
    total = 0.0
    for ks in k:
        for us in u:
            if ks > us:
                total += 1.0
            elif ks == us:
                total += 0.5
    return total / (k.size * u.size)


def _oscr_curve(correct: np.ndarray, known_scores: np.ndarray, unknown_scores: np.ndarray):
    """(FPR, CCR) points over descending distinct thresholds, with the tau ->
    +inf origin prepended; thresholds are score values, membership is >=."""
    thresholds = np.unique(np.concatenate([known_scores, unknown_scores]))[::-1]
    n_k = known_scores.size
    n_u = unknown_scores.size
    fpr = [0.0]
    ccr = [0.0]
    for tau in thresholds:
        ccr.append(float(np.sum(correct & (known_scores >= tau))) / n_k)
        fpr.append(float(np.sum(unknown_scores >= tau)) / n_u)
    return np.asarray(fpr), np.asarray(ccr)


def _trapezoid(fpr: np.ndarray, ccr: np.ndarray) -> float:
    area = 0.0
    for i in range(1, fpr.size):
        area += (fpr[i] - fpr[i - 1]) * 0.5 * (ccr[i] + ccr[i - 1])
    return float(area)


def oscr(correct, known_scores, unknown_scores) -> float:
    """Area under correct-classification-rate vs false-positive-rate.

    For threshold tau: CCR = fraction of knowns both correctly classified and
    scored >= tau; FPR = fraction of unknowns scored >= tau.
    """
    correct = np.asarray(correct, dtype=bool)
    k = np.asarray(known_scores, dtype=np.float64)
    u = np.asarray(unknown_scores, dtype=np.float64)
    if k.size == 0 or u.size == 0:
        raise EmptySideError("oscr needs non-empty known and unknown sides")
    if correct.shape != k.shape:
        raise ValueError("correctness flags must align with known scores")
    fpr, ccr = _oscr_curve(correct, k, u)
    return _trapezoid(fpr, ccr)


def oscr_bruteforce(correct, known_scores, unknown_scores) -> float:
    """Threshold-sweep oracle: recount both rates from scratch per threshold."""
    correct = np.asarray(correct, dtype=bool)
    k = np.asarray(known_scores, dtype=np.float64)
    u = np.asarray(unknown_scores, dtype=np.float64)
    if k.size == 0 or u.size == 0:
        raise EmptySideError("oscr needs non-empty known and unknown sides")
    points = [(0.0, 0.0)]
    for tau in sorted(set(k.tolist()) | set(u.tolist()), reverse=True):
        cc = sum(1 for c, s in zip(correct, k) if c and s >= tau) / k.size
        fp = sum(1 for s in u if s >= tau) / u.size
        points.append((fp, cc))
    area = 0.0
    for (f0, c0), (f1, c1) in zip(points, points[1:]):
        area += (f1 - f0) * 0.5 * (c0 + c1)
    return float(area)


@dataclass
class MetricReport:
    """Per-task metric rows plus Avg/Last aggregates."""

    rows: list[dict] = field(default_factory=list)

    def add(self, task: int, acc: float, auroc_value: float | None, oscr_value: float | None, **extra) -> dict:
        row = {"task": task, "acc": acc, "auroc": auroc_value, "oscr": oscr_value, **extra}
        self.rows.append(row)
        return row

    def series(self, metric: str) -> list[float]:
        return [r[metric] for r in self.rows if r.get(metric) is not None]

    def average(self, metric: str) -> float | None:
        values = self.series(metric)
        return float(np.mean(values)) if values else None

    def last(self, metric: str) -> float | None:
        for row in reversed(self.rows):
            if row.get(metric) is not None:
                return float(row[metric])
        return None
