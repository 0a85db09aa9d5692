"""Screening-metric evaluation: AUROC/AUPRC with bootstrap confidence
intervals, recall-anchored operating points, prevalence-weighted multi-class
AUROC, and the paired statistical tests used for ablation comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .util import write_json

DEFAULT_RECALL_TARGETS = (0.6, 0.7, 0.8, 0.9)


class MetricError(ValueError):
    pass


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(
            f"scores and labels must be matching 1-D arrays, got "
            f"{scores.shape} and {labels.shape}"
        )
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must lie in {0, 1}")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties
    counted one half (the Mann-Whitney statistic)."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs both classes present")
    ranks = stats.rankdata(scores, method="average")
    pos_rank_sum = ranks[labels == 1].sum()
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: the step-wise integral of precision over recall at
    each threshold crossing, scanning thresholds from high to low."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("auprc needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # Indices where the threshold changes (last element of each tie group).
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    cut = np.concatenate([boundary, [scores.size - 1]])
    tp = np.cumsum(sorted_labels)[cut]
    predicted = cut + 1
    precision = tp / predicted
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


@dataclass
class OperatingPoint:
    target_recall: float
    achieved_recall: float
    fpr: float
    precision: float
    threshold: float


def operating_points(scores, labels, targets=DEFAULT_RECALL_TARGETS) -> list[OperatingPoint]:
    """For each target recall, the attainable recall closest to it.

    Thresholds are the distinct score values (predict positive when score >=
    threshold). Distance ties prefer the higher recall, then the lower
    threshold.
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("operating points need both classes present")
    thresholds = np.unique(scores)[::-1]
    rows = []
    for t in thresholds:
        predicted = scores >= t
        tp = int((predicted & (labels == 1)).sum())
        fp = int((predicted & (labels == 0)).sum())
        recall = tp / n_pos
        fpr = fp / n_neg
        precision = tp / (tp + fp)
        rows.append((recall, fpr, precision, float(t)))
    out = []
    for target in targets:
        # quantize the distance so equidistant recalls tie despite float fuzz
        best = min(rows, key=lambda r: (round(abs(r[0] - target), 12), -r[0], r[3]))
        out.append(
            OperatingPoint(
                target_recall=float(target),
                achieved_recall=best[0],
                fpr=best[1],
                precision=best[2],
                threshold=best[3],
            )
        )
    return out


def bootstrap_ci(
    scores,
    labels,
    metric,
    n_draws: int = 10000,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile bootstrap interval over n_draws resamples with replacement.

    Resamples on which the metric is undefined (single class, no positives)
    are redrawn. Deterministic for a fixed seed.
    """
    scores, labels = _check_binary(scores, labels)
    metric(scores, labels)  # must be computable on the full sample
    rng = np.random.default_rng(seed)
    n = scores.size
    values = np.empty(n_draws, dtype=np.float64)
    for d in range(n_draws):
        while True:
            idx = rng.integers(0, n, size=n)
            try:
                values[d] = metric(scores[idx], labels[idx])
                break
            except MetricError:
                continue
    alpha = (1.0 - level) / 2.0
    lower, upper = np.quantile(values, [alpha, 1.0 - alpha])
    return float(lower), float(upper)


def weighted_auroc(scores, labels) -> float:
    """One-vs-rest AUROC per class, averaged with class-prevalence weights.

    ``scores`` is (n, n_classes); classes absent from the labels are excluded
    and the prevalence weights renormalized over the present ones.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise MetricError(
            f"scores must be (n, n_classes) aligned with labels, got {scores.shape}"
        )
    present = np.unique(labels)
    if present.size < 2:
        raise MetricError("weighted auroc needs at least 2 classes present")
    if present.min() < 0 or present.max() >= scores.shape[1]:
        raise MetricError("label outside the score-matrix class range")
    aucs = [auroc(scores[:, cls], (labels == cls).astype(int)) for cls in present]
    if all(a == aucs[0] for a in aucs):
        # prevalence weights sum to 1, so the weighted mean of equal values
        # is that value; returning it directly keeps the reduction exact
        return aucs[0]
    prevalences = [float((labels == cls).mean()) for cls in present]
    return float(np.dot(prevalences, aucs))


@dataclass
class StatTestResult:
    name: str
    statistic: float
    p_value: float
    pairwise: np.ndarray | None = None


def _signed_rank_distribution(doubled_ranks: list[int]) -> np.ndarray:
    """Exact distribution of the positive-rank sum over all sign assignments.

    Ranks are doubled so tied average ranks become integers; the returned
    array counts sign assignments per doubled rank-sum value.
    """
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b) -> StatTestResult:
    """Exact two-sided Wilcoxon signed-rank test on paired values.

    Zero differences are dropped; ties in |difference| get average ranks and
    the exact null distribution is computed over all sign assignments, so the
    test is valid for the small n used in fold-level comparisons.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError("paired samples must be matching 1-D arrays")
    diff = a - b
    diff = diff[diff != 0]
    if diff.size == 0:
        raise MetricError("all differences zero")
    if diff.size < 2:
        raise MetricError("need at least 2 non-zero differences")
    if diff.size > 25:
        raise MetricError("exact test supported for n <= 25 non-zero differences")
    ranks = stats.rankdata(np.abs(diff), method="average")
    w_plus = float(ranks[diff > 0].sum())
    doubled = [int(round(2 * r)) for r in ranks]
    counts = _signed_rank_distribution(doubled)
    total = 2 ** diff.size
    w2 = int(round(2 * w_plus))
    p_le = sum(counts[: w2 + 1]) / total
    p_ge = sum(counts[w2:]) / total
    p = min(1.0, 2.0 * min(p_le, p_ge))
    return StatTestResult(name="wilcoxon-signed-rank", statistic=w_plus, p_value=float(p))


def friedman_nemenyi(groups) -> StatTestResult:
    """Friedman chi-square test across k treatments on n paired blocks, with
    Nemenyi pairwise p-values from the studentized-range distribution."""
    matrix = np.asarray(groups, dtype=np.float64)
    if matrix.ndim != 2:
        raise MetricError("groups must be k equal-length lists of paired values")
    k, n = matrix.shape
    if k < 3:
        raise MetricError("friedman test needs at least 3 groups")
    if n < 2:
        raise MetricError("friedman test needs at least 2 blocks")
    ranks = np.apply_along_axis(stats.rankdata, 0, matrix)  # rank within block
    mean_ranks = ranks.mean(axis=1)
    statistic = 12.0 * n / (k * (k + 1)) * np.sum((mean_ranks - (k + 1) / 2.0) ** 2)
    p_value = float(stats.chi2.sf(statistic, k - 1))

    scale = np.sqrt(k * (k + 1) / (6.0 * n))
    pairwise = np.ones((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            q = abs(mean_ranks[i] - mean_ranks[j]) / scale * np.sqrt(2.0)
            p = float(stats.studentized_range.sf(q, k, np.inf))
            pairwise[i, j] = pairwise[j, i] = min(1.0, p)
    return StatTestResult(
        name="friedman-chi-square", statistic=float(statistic), p_value=p_value,
        pairwise=pairwise,
    )


@dataclass
class MetricsReport:
    auroc: float
    auprc: float
    auroc_ci: tuple[float, float]
    auprc_ci: tuple[float, float]
    operating_points: list[OperatingPoint] = field(default_factory=list)
    n: int = 0
    n_positive: int = 0

    def to_json_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "auprc": self.auprc,
            "auroc_ci": list(self.auroc_ci),
            "auprc_ci": list(self.auprc_ci),
            "operating_points": [vars(op) for op in self.operating_points],
            "n": self.n,
            "n_positive": self.n_positive,
        }

    def save(self, path) -> None:
        write_json(path, self.to_json_dict())

    def table_rows(self) -> list[tuple[str, float, float, float]]:
        """(metric, point, ci_lower, ci_upper) rows for CSV export."""
        return [
            ("auroc", self.auroc, *self.auroc_ci),
            ("auprc", self.auprc, *self.auprc_ci),
        ]


def evaluate_predictions(
    scores,
    labels,
    targets=DEFAULT_RECALL_TARGETS,
    n_draws: int = 10000,
    seed: int = 0,
    level: float = 0.95,
) -> MetricsReport:
    scores, labels = _check_binary(scores, labels)
    return MetricsReport(
        auroc=auroc(scores, labels),
        auprc=auprc(scores, labels),
        auroc_ci=bootstrap_ci(scores, labels, auroc, n_draws=n_draws, seed=seed, level=level),
        auprc_ci=bootstrap_ci(scores, labels, auprc, n_draws=n_draws, seed=seed, level=level),
        operating_points=operating_points(scores, labels, targets),
        n=int(scores.size),
        n_positive=int(labels.sum()),
    )
