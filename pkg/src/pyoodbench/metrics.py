"""Separation and calibration metrics.

Detection metrics treat OOD as the positive class and ``-id_score`` as the
detector score (:data:`ORIENTATION`).  AUROC is the Mann-Whitney statistic
with half credit for ties; AUCPR is average precision with tied scores
processed as one threshold.  Calibration uses equal-width confidence bins.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from pyoodbench.errors import (
    DomainError,
    ParameterError,
    UndefinedMetricError,
    UsageError,
)
from pyoodbench.scores import ScoredSample

__all__ = [
    "ORIENTATION",
    "DEFAULT_N_BINS",
    "ReliabilityBin",
    "ReliabilityBins",
    "EvalReport",
    "auroc",
    "aucpr",
    "ece",
    "id_accuracy",
    "evaluate",
]

ORIENTATION = "positive class = OOD; detector score = -id_score"
DEFAULT_N_BINS = 15


def _detector(samples: Sequence[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    positive = np.array([s.is_ood for s in samples], dtype=bool)
    n_pos = int(positive.sum())
    if n_pos == 0 or n_pos == len(samples):
        raise UndefinedMetricError(
            f"detection metrics need at least one ID and one OOD sample; got "
            f"{len(samples) - n_pos} ID and {n_pos} OOD."
        )
    return -np.array([s.id_score for s in samples], dtype=np.float64), positive


def _auroc(detector: np.ndarray, positive: np.ndarray) -> float:
    ranks = rankdata(detector, method="average")
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    u = math.fsum(ranks[positive]) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _average_precision(detector: np.ndarray, positive: np.ndarray) -> float:
    order = np.argsort(-detector, kind="mergesort")
    d, pos = detector[order], positive[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    # Last index of every group of equal scores.
    ends = np.flatnonzero(np.r_[d[1:] != d[:-1], True])
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    return math.fsum(np.diff(recall, prepend=0.0) * precision)


def auroc(samples: Sequence[ScoredSample]) -> float:
    """Probability that a random OOD sample scores below a random ID sample.

    Ties count one half.

    Raises:
        UndefinedMetricError: Without at least one ID and one OOD sample.

    Example:
        >>> s = [ScoredSample(0, "mcp", 0.9, False, 0), ScoredSample(1, "mcp", 0.1, True, 0)]
        >>> auroc(s)
        1.0

    """
    return _auroc(*_detector(samples))


def aucpr(samples: Sequence[ScoredSample]) -> float:
    """Average precision of detecting OOD samples, ties grouped.

    Raises:
        UndefinedMetricError: Without at least one ID and one OOD sample.

    """
    return _average_precision(*_detector(samples))


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReliabilityBin:
    """One confidence bin; empty bins have ``None`` for the means."""

    lower: float
    upper: float
    mean_confidence: Optional[float]
    accuracy: Optional[float]
    count: int


@dataclass(frozen=True)
class ReliabilityBins:
    """Equal-width bins partitioning ``[0, 1]``; the last bin is closed on the right."""

    n_bins: int
    bins: tuple[ReliabilityBin, ...]

    @property
    def total(self) -> int:
        """Number of binned predictions."""
        return sum(b.count for b in self.bins)

    def to_rows(self) -> list[dict[str, Any]]:
        """Rows for the ``bin_lower,bin_upper,mean_conf,accuracy,count`` CSV."""
        return [
            {
                "bin_lower": b.lower,
                "bin_upper": b.upper,
                "mean_conf": b.mean_confidence,
                "accuracy": b.accuracy,
                "count": b.count,
            }
            for b in self.bins
        ]


def ece(
    confidences: Iterable[float],
    correct: Iterable[bool],
    n_bins: int = DEFAULT_N_BINS,
) -> tuple[float, ReliabilityBins]:
    """Expected calibration error and the reliability bins behind it.

    ``ECE = sum_b (count_b / N) * |accuracy_b - mean_confidence_b|``.

    Args:
        confidences: Confidence of each prediction, in ``[0, 1]``.
        correct: Whether each prediction was right.
        n_bins: Number of equal-width bins.

    Raises:
        UsageError: On empty or mismatched inputs.
        DomainError: If a confidence lies outside ``[0, 1]``.
        ParameterError: If ``n_bins < 1``.

    """
    conf = np.asarray(list(confidences), dtype=np.float64)
    hit = np.asarray(list(correct), dtype=bool)
    if n_bins < 1:
        raise ParameterError(f"n_bins must be a positive integer, got {n_bins}.")
    if conf.size == 0:
        raise UsageError("ECE needs at least one prediction.")
    if conf.shape != hit.shape:
        raise UsageError(f"{conf.size} confidences but {hit.size} correctness flags.")
    if not np.all((conf >= 0.0) & (conf <= 1.0)):
        raise DomainError("confidences must lie in [0, 1].")

    index = np.minimum(np.floor(conf * n_bins).astype(np.int64), n_bins - 1)
    bins = []
    parts = []
    for b in range(n_bins):
        members = index == b
        count = int(members.sum())
        lower, upper = b / n_bins, (b + 1) / n_bins
        if count == 0:
            bins.append(ReliabilityBin(lower, upper, None, None, 0))
            continue
        mean_conf = math.fsum(conf[members]) / count
        accuracy = int(hit[members].sum()) / count
        bins.append(ReliabilityBin(lower, upper, mean_conf, accuracy, count))
        parts.append(count / conf.size * abs(accuracy - mean_conf))
    return math.fsum(parts), ReliabilityBins(n_bins, tuple(bins))


def id_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact matches.

    Raises:
        UsageError: If the lengths differ or both are empty.

    """
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.shape != true.shape:
        raise UsageError(f"{pred.size} predictions but {true.size} labels.")
    if pred.size == 0:
        raise UsageError("accuracy needs at least one ID sample.")
    return int(np.sum(pred == true)) / pred.size


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    """Metrics of one method on one benchmark."""

    method: str
    auroc: float
    aucpr: float
    id_accuracy: float
    ece: float
    n_id: int
    n_ood: int
    config_fingerprint: str = ""

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready dict with exactly the report fields."""
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> EvalReport:
        """Inverse of :meth:`to_dict`; unknown keys are rejected."""
        return cls(**dict(values))


def evaluate(
    samples: Sequence[ScoredSample],
    n_bins: int = DEFAULT_N_BINS,
    method: Optional[str] = None,
    fingerprint: str = "",
) -> tuple[EvalReport, ReliabilityBins]:
    """Compute every metric for one scored benchmark.

    Accuracy and ECE use the ID samples only, with each sample's
    ``confidence`` as the calibrated probability.

    Raises:
        UsageError: If the samples mix methods (and *method* is not given)
            or an ID sample has no class label.
        UndefinedMetricError: Without both ID and OOD samples.

    """
    samples = list(samples)
    if method is None:
        tags = sorted({s.method for s in samples})
        if len(tags) != 1:
            raise UsageError(f"samples mix methods {tags}; pass method= explicitly.")
        method = tags[0]
    detector, positive = _detector(samples)
    id_samples = [s for s in samples if not s.is_ood]
    if any(s.true_class is None for s in id_samples):
        raise UsageError("every ID sample needs its true_class for accuracy and ECE.")
    predictions = [s.predicted_class for s in id_samples]
    labels = [s.true_class for s in id_samples]
    value, bins = ece(
        [s.confidence for s in id_samples],
        [p == t for p, t in zip(predictions, labels)],
        n_bins,
    )
    report = EvalReport(
        method=method,
        auroc=_auroc(detector, positive),
        aucpr=_average_precision(detector, positive),
        id_accuracy=id_accuracy(predictions, labels),
        ece=value,
        n_id=len(id_samples),
        n_ood=len(samples) - len(id_samples),
        config_fingerprint=fingerprint,
    )
    return report, bins
