"""Multiclass classification metrics and multi-seed aggregation.

Conventions fixed for reproducibility: argmax ties break toward the lowest
class index, macro averaging for F1 and one-vs-rest AUC, population
standard deviation for seed aggregation (a flag switches to sample std).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError


class ScoreWarning(UserWarning):
    """A metric skipped part of its input (e.g. an unscorable class)."""


@dataclass
class EvalBatch:
    """Ground truth, class probabilities and derived argmax predictions."""

    y_true: np.ndarray
    y_score: np.ndarray
    y_pred: np.ndarray = field(init=False)

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.int64)
        self.y_score = np.asarray(self.y_score, dtype=np.float64)
        if self.y_score.ndim != 2 or self.y_true.ndim != 1:
            raise MetricError(f"scores must be (N, C) and labels (N,), got {self.y_score.shape}, {self.y_true.shape}")
        if self.y_true.shape[0] != self.y_score.shape[0]:
            raise MetricError(f"{self.y_true.shape[0]} labels for {self.y_score.shape[0]} score rows")
        if self.y_true.size == 0:
            raise MetricError("empty evaluation batch")
        c = self.y_score.shape[1]
        if self.y_true.min() < 0 or self.y_true.max() >= c:
            raise MetricError(f"label outside [0, {c})")
        if np.max(np.abs(self.y_score.sum(axis=1) - 1.0)) > 1e-9:
            raise MetricError("score rows must sum to 1 within 1e-9")
        self.y_pred = np.argmax(self.y_score, axis=1)

    @property
    def num_classes(self) -> int:
        return self.y_score.shape[1]


def accuracy(batch: EvalBatch) -> float:
    """Fraction of exact matches."""
    return float(np.mean(batch.y_pred == batch.y_true))


def macro_f1(batch: EvalBatch) -> float:
    """Unweighted mean of per-class F1, with 0/0 read as 0.

    A class absent from both the truth and the predictions is skipped;
    a class absent from the truth but predicted contributes F1 = 0.
    """
    f1s = []
    for c in range(batch.num_classes):
        in_true = bool(np.any(batch.y_true == c))
        in_pred = bool(np.any(batch.y_pred == c))
        if not in_true and not in_pred:
            continue
        tp = float(np.sum((batch.y_pred == c) & (batch.y_true == c)))
        fp = float(np.sum((batch.y_pred == c) & (batch.y_true != c)))
        fn = float(np.sum((batch.y_pred != c) & (batch.y_true == c)))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    if not f1s:
        raise MetricError("no class present in truth or predictions")
    return float(np.mean(f1s))


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by the mean rank of the tie group."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def macro_ovr_auc(batch: EvalBatch) -> float:
    """Macro mean of one-vs-rest AUC via the rank (Mann-Whitney) formula.

    Classes lacking positives or negatives are skipped with a warning and
    excluded from the mean; midranks handle score ties.
    """
    aucs = []
    for c in range(batch.num_classes):
        pos = batch.y_true == c
        n_pos = int(pos.sum())
        n_neg = pos.size - n_pos
        if n_pos == 0 or n_neg == 0:
            warnings.warn(f"class {c} lacks positives or negatives; skipped in AUC", ScoreWarning)
            continue
        ranks = _midranks(batch.y_score[:, c])
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        aucs.append(auc)
    if not aucs:
        raise MetricError("no class has both positives and negatives; AUC undefined")
    return float(np.mean(aucs))


def cohen_kappa(batch: EvalBatch) -> float:
    """Agreement beyond chance from the confusion-matrix marginals."""
    c = batch.num_classes
    n = batch.y_true.size
    confusion = np.zeros((c, c))
    np.add.at(confusion, (batch.y_true, batch.y_pred), 1.0)
    p_o = float(np.trace(confusion)) / n
    p_e = float(np.sum(confusion.sum(axis=1) * confusion.sum(axis=0))) / (n * n)
    if p_e >= 1.0 - 1e-15:
        if p_o >= 1.0 - 1e-15:
            return 0.0
        raise MetricError("kappa undefined: chance agreement is 1 with imperfect agreement")
    return (p_o - p_e) / (1.0 - p_e)


def evaluate(y_true: np.ndarray, y_score: np.ndarray) -> dict[str, float]:
    """All four metrics for one prediction batch."""
    batch = EvalBatch(y_true=y_true, y_score=y_score)
    return {
        "accuracy": accuracy(batch),
        "macro_f1": macro_f1(batch),
        "macro_auc": macro_ovr_auc(batch),
        "kappa": cohen_kappa(batch),
    }


@dataclass
class MetricStat:
    mean: float
    std: float | None
    n: int

    def formatted(self, scale: float = 1.0) -> str:
        if self.std is None:
            return f"{self.mean * scale:.2f}"
        return f"{self.mean * scale:.2f}±{self.std * scale:.2f}"


def aggregate(runs: list[dict[str, float]], sample_std: bool = False) -> dict[str, MetricStat]:
    """Per-metric mean and std over runs.

    Uses the population standard deviation unless ``sample_std``. Fewer
    than two runs skips aggregation and passes the single value through
    with no spread.
    """
    if not runs:
        raise MetricError("no runs to aggregate")
    keys = list(runs[0])
    for r in runs[1:]:
        if list(r) != keys:
            raise MetricError("runs report different metric sets")
    if len(runs) < 2:
        return {k: MetricStat(mean=float(runs[0][k]), std=None, n=1) for k in keys}
    ddof = 1 if sample_std else 0
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in runs], dtype=np.float64)
        out[k] = MetricStat(mean=float(vals.mean()), std=float(vals.std(ddof=ddof)), n=len(runs))
    return out
