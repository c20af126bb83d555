"""Detection and recognition metrics.

ID samples are the positive class and higher scores mean "more ID".  A
threshold ``theta`` accepts a sample as ID when ``score >= theta``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError


def _pair(id_scores, ood_scores):
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise MetricError("both ID and OOD samples are required")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise MetricError("scores must be finite")
    return a, b


def operating_point(id_scores, ood_scores, tpr_target: float = 0.95):
    """(threshold, tpr, fpr) at the largest threshold whose TPR reaches the target."""
    a, b = _pair(id_scores, ood_scores)
    ids = np.sort(a)
    # Largest threshold keeping at least ceil(target * n) ID samples: the
    # ID score at that rank from the top.
    needed = int(np.ceil(tpr_target * ids.size - 1e-12))
    needed = min(max(needed, 1), ids.size)
    theta = ids[ids.size - needed]
    tpr = np.count_nonzero(a >= theta) / a.size
    fpr = np.count_nonzero(b >= theta) / b.size
    return float(theta), float(tpr), float(fpr)


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    return operating_point(id_scores, ood_scores, tpr_target)[2]


def detection_error(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    _, tpr, fpr = operating_point(id_scores, ood_scores, tpr_target)
    return 0.5 * (1.0 - tpr) + 0.5 * fpr


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney estimate of P(ID > OOD) + 0.5 P(tie), via rank sums."""
    a, b = _pair(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    rank_sum = ranks[: a.size].sum()
    return float((rank_sum - a.size * (a.size + 1) / 2.0) / (a.size * b.size))


def top1(predicted, true) -> float:
    predicted = np.asarray(predicted).ravel()
    true = np.asarray(true).ravel()
    if predicted.size == 0 or predicted.shape != true.shape:
        raise MetricError("top-1 needs equally sized, non-empty label arrays")
    return 100.0 * np.count_nonzero(predicted == true) / predicted.size


def histograms(id_scores, ood_scores, bins: int = 50):
    """Shared-range equal-width histograms: (edges, id_counts, ood_counts)."""
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if bins < 2:
        raise MetricError("at least two bins are required")
    both = np.concatenate([a, b])
    if both.size == 0:
        raise MetricError("no scores to bin")
    lo, hi = float(both.min()), float(both.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return edges, np.histogram(a, edges)[0], np.histogram(b, edges)[0]


def overlap(id_scores, ood_scores, bins: int = 50) -> float:
    """Histogram intersection of the two normalized score distributions."""
    a, b = _pair(id_scores, ood_scores)
    if bins < 2:
        raise MetricError("at least two bins are required")
    if np.ptp(np.concatenate([a, b])) == 0:
        return 1.0
    _, ha, hb = histograms(a, b, bins)
    return float(np.minimum(ha / a.size, hb / b.size).sum())


@dataclass
class MetricReport:
    error: float | None = None
    fpr95: float | None = None
    auroc: float | None = None
    top1: float | None = None
    overlap: float | None = None
    n_id: int = 0
    n_ood: int = 0
    tau: float | None = None
    top1_closed: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def build_report(id_scores, ood_scores, predicted, true, tau=None, closed_predicted=None,
                 bins: int = 50) -> MetricReport:
    """Assemble a report; OOD-dependent metrics stay ``None`` when no OOD sample is present."""
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    report = MetricReport(n_id=int(id_scores.size), n_ood=int(ood_scores.size), tau=tau)
    if id_scores.size:
        report.top1 = top1(predicted, true)
        if closed_predicted is not None:
            report.top1_closed = top1(closed_predicted, true)
    if id_scores.size and ood_scores.size:
        report.error = detection_error(id_scores, ood_scores)
        report.fpr95 = fpr_at_tpr(id_scores, ood_scores)
        report.auroc = auroc(id_scores, ood_scores)
        report.overlap = overlap(id_scores, ood_scores, bins)
    return report
