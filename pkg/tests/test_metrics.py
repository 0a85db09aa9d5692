import itertools

import numpy as np
import pytest

from noduleclip.metrics import (
    MetricError,
    StatTestResult,
    auprc,
    auroc,
    bootstrap_ci,
    evaluate_predictions,
    friedman_nemenyi,
    operating_points,
    weighted_auroc,
    wilcoxon_signed_rank,
)


def auroc_pairs_oracle(scores, labels):
    """All-pairs Mann-Whitney count, ties worth one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def auprc_sweep_oracle(scores, labels):
    """Exhaustive threshold sweep: sum precision * recall increments."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = labels.sum()
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores), reverse=True):
        predicted = scores >= t
        tp = int((predicted & (labels == 1)).sum())
        precision = tp / int(predicted.sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def random_dataset(rng, n_max=50):
    n = int(rng.integers(4, n_max + 1))
    scores = np.round(rng.uniform(0, 1, n), 2)  # rounding forces score ties
    labels = rng.integers(0, 2, n)
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == n:
        labels[0] = 0
    return scores, labels


class TestAuroc:
    def test_hand_case(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_perfect_separation(self):
        assert auroc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_matches_all_pairs_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            scores, labels = random_dataset(rng)
            assert auroc(scores, labels) == auroc_pairs_oracle(scores, labels)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores, labels = random_dataset(rng)
        assert auroc(scores, labels) == auroc(np.exp(3 * scores), labels)

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            auroc([0.1, 0.2], [1, 1])


class TestAuprc:
    def test_perfect_ranking(self):
        assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_single_positive_ranked_last(self):
        n = 10
        scores = np.linspace(1.0, 0.1, n)
        labels = np.zeros(n, dtype=int)
        labels[-1] = 1
        assert abs(auprc(scores, labels) - 1.0 / n) < 1e-12

    def test_hand_case_vs_sweep_oracle(self):
        scores = [0.1, 0.4, 0.35, 0.8]
        labels = [0, 0, 1, 1]
        assert abs(auprc(scores, labels) - auprc_sweep_oracle(scores, labels)) < 1e-9

    def test_matches_sweep_oracle_random(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            scores, labels = random_dataset(rng)
            assert abs(auprc(scores, labels) - auprc_sweep_oracle(scores, labels)) < 1e-12

    def test_no_positives_rejected(self):
        with pytest.raises(MetricError):
            auprc([0.5, 0.6], [0, 0])


class TestOperatingPoints:
    def brute_force(self, scores, labels, target):
        scores = np.asarray(scores, dtype=float)
        labels = np.asarray(labels, dtype=int)
        n_pos, n_neg = labels.sum(), (1 - labels).sum()
        rows = []
        for t in np.unique(scores)[::-1]:
            predicted = scores >= t
            tp = int((predicted & (labels == 1)).sum())
            fp = int((predicted & (labels == 0)).sum())
            rows.append((tp / n_pos, fp / n_neg, tp / (tp + fp), float(t)))
        return min(rows, key=lambda r: (round(abs(r[0] - target), 12), -r[0], r[3]))

    def test_perfectly_separated(self):
        scores = np.concatenate([np.linspace(0.9, 0.8, 10), np.linspace(0.2, 0.1, 10)])
        labels = np.concatenate([np.ones(10, int), np.zeros(10, int)])
        for op in operating_points(scores, labels):
            assert op.fpr == 0.0
            assert op.precision == 1.0

    def test_tie_goes_to_higher_recall(self):
        # 5 positives: attainable recalls are multiples of 0.2; target 0.7 is
        # equidistant from 0.6 and 0.8 and must select 0.8
        scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.45, 0.3, 0.2, 0.15, 0.1]
        labels = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
        (op,) = operating_points(scores, labels, targets=[0.7])
        assert op.achieved_recall == 0.8

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            scores, labels = random_dataset(rng)
            for target in (0.6, 0.7, 0.8, 0.9):
                (op,) = operating_points(scores, labels, targets=[target])
                recall, fpr, precision, threshold = self.brute_force(scores, labels, target)
                assert op.achieved_recall == recall
                assert op.fpr == fpr
                assert op.precision == precision
                assert op.threshold == threshold


class TestBootstrap:
    def test_constant_metric_degenerate_interval(self):
        scores = [0.9, 0.9, 0.1, 0.1]
        labels = [1, 1, 0, 0]
        lower, upper = bootstrap_ci(scores, labels, auroc, n_draws=200, seed=0)
        assert lower == upper == 1.0

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(4)
        scores, labels = random_dataset(rng, n_max=30)
        a = bootstrap_ci(scores, labels, auroc, n_draws=500, seed=11)
        b = bootstrap_ci(scores, labels, auroc, n_draws=500, seed=11)
        assert a == b

    def test_matches_independent_reimplementation(self):
        rng = np.random.default_rng(5)
        scores = np.round(rng.uniform(0, 1, 20), 2)
        labels = rng.integers(0, 2, 20)
        labels[0], labels[1] = 0, 1
        n_draws, seed = 400, 7
        got = bootstrap_ci(scores, labels, auroc, n_draws=n_draws, seed=seed)

        # independent reimplementation of the stated procedure
        rng2 = np.random.default_rng(seed)
        values = []
        while len(values) < n_draws:
            idx = rng2.integers(0, 20, size=20)
            resampled = labels[idx]
            if resampled.min() == resampled.max():
                continue
            values.append(auroc_pairs_oracle(scores[idx], resampled))
        expected = np.quantile(np.asarray(values), [0.025, 0.975])
        assert abs(got[0] - expected[0]) < 1e-12
        assert abs(got[1] - expected[1]) < 1e-12

    def test_width_shrinks_with_n(self):
        rng = np.random.default_rng(6)

        def width(n):
            scores = rng.uniform(0, 1, n)
            labels = (scores + rng.normal(0, 0.3, n) > 0.5).astype(int)
            labels[:2] = [0, 1]
            lo, hi = bootstrap_ci(scores, labels, auroc, n_draws=300, seed=1)
            return hi - lo

        small = np.mean([width(20) for _ in range(5)])
        large = np.mean([width(200) for _ in range(5)])
        assert large < small

    def test_undefined_on_full_sample_rejected(self):
        with pytest.raises(MetricError):
            bootstrap_ci([0.5, 0.6], [1, 1], auroc, n_draws=10, seed=0)


class TestWeightedAuroc:
    def test_binary_reduces_to_auroc(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            scores, labels = random_dataset(rng, n_max=30)
            matrix = np.stack([1 - scores, scores], axis=1)
            assert weighted_auroc(matrix, labels) == auroc(scores, labels)

    def test_perfect_separation(self):
        labels = np.asarray([0, 0, 1, 1, 2, 2])
        matrix = np.eye(3)[labels]
        assert weighted_auroc(matrix, labels) == 1.0

    def test_three_class_hand_case_vs_pair_counting(self):
        labels = np.asarray([0, 0, 0, 1, 1, 2])
        rng = np.random.default_rng(8)
        matrix = rng.uniform(0, 1, (6, 3))
        expected = 0.0
        for cls, prevalence in ((0, 3 / 6), (1, 2 / 6), (2, 1 / 6)):
            expected += prevalence * auroc_pairs_oracle(
                matrix[:, cls], (labels == cls).astype(int)
            )
        assert abs(weighted_auroc(matrix, labels) - expected) < 1e-12

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            weighted_auroc(np.ones((3, 2)), np.zeros(3, dtype=int))


class TestWilcoxon:
    def test_n5_uniform_sign_floor(self):
        a = np.asarray([1.0, 2.0, 3.0, 4.0, 5.0])
        b = a - np.asarray([0.1, 0.2, 0.3, 0.4, 0.5])
        result = wilcoxon_signed_rank(a, b)
        assert result.p_value == 0.0625

    def test_all_zero_differences_rejected(self):
        a = np.asarray([1.0, 2.0, 3.0])
        with pytest.raises(MetricError, match="zero"):
            wilcoxon_signed_rank(a, a)

    def test_n6_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(9)
        from scipy.stats import rankdata

        for _ in range(30):
            diff = np.round(rng.normal(0, 1, 6), 1)
            diff = diff[diff != 0]
            if diff.size < 2:
                continue
            a = np.abs(diff) * (diff > 0)
            b = np.abs(diff) * (diff < 0)
            result = wilcoxon_signed_rank(a, b)
            ranks = rankdata(np.abs(diff))
            w_obs = ranks[diff > 0].sum()
            stats = [
                sum(r for r, s in zip(ranks, signs) if s)
                for signs in itertools.product([False, True], repeat=diff.size)
            ]
            n_total = len(stats)
            p_le = sum(w <= w_obs + 1e-12 for w in stats) / n_total
            p_ge = sum(w >= w_obs - 1e-12 for w in stats) / n_total
            expected = min(1.0, 2.0 * min(p_le, p_ge))
            assert abs(result.p_value - expected) < 1e-12

    def test_matches_scipy_exact_when_tie_free(self):
        from scipy.stats import wilcoxon as scipy_wilcoxon

        rng = np.random.default_rng(10)
        for _ in range(20):
            a = rng.normal(0, 1, 8)
            b = rng.normal(0.3, 1, 8)
            diff = a - b
            ranks = np.abs(diff)
            if len(set(np.round(ranks, 12))) < len(ranks) or (diff == 0).any():
                continue
            ours = wilcoxon_signed_rank(a, b)
            ref = scipy_wilcoxon(a, b, alternative="two-sided", mode="exact")
            assert abs(ours.p_value - ref.pvalue) < 1e-10


class TestFriedmanNemenyi:
    def test_identical_groups(self):
        groups = [[0.8, 0.7, 0.9, 0.6, 0.75]] * 3
        result = friedman_nemenyi(groups)
        assert result.statistic == 0.0
        assert result.p_value == 1.0
        assert np.allclose(result.pairwise, 1.0)

    def test_block_permutation_invariance(self):
        rng = np.random.default_rng(11)
        groups = rng.normal(0, 1, (4, 6))
        base = friedman_nemenyi(groups)
        perm = rng.permutation(6)
        permuted = friedman_nemenyi(groups[:, perm])
        assert abs(base.statistic - permuted.statistic) < 1e-12

    def test_k3_n5_matches_rank_sum_formula(self):
        rng = np.random.default_rng(12)
        groups = rng.normal(0, 1, (3, 5))
        result = friedman_nemenyi(groups)
        # direct formula evaluation on hand-computed block ranks
        k, n = 3, 5
        ranks = np.zeros((k, n))
        for block in range(n):
            order = np.argsort(np.argsort(groups[:, block]))
            ranks[:, block] = order + 1
        mean_ranks = ranks.mean(axis=1)
        expected = 12 * n / (k * (k + 1)) * np.sum((mean_ranks - (k + 1) / 2) ** 2)
        assert abs(result.statistic - expected) < 1e-12

    def test_strong_separation_gives_small_p(self):
        groups = [[1, 1, 1, 1, 1, 1], [2, 2, 2, 2, 2, 2], [3, 3, 3, 3, 3, 3]]
        result = friedman_nemenyi(groups)
        assert result.p_value < 0.01
        assert result.pairwise[0, 2] < result.pairwise[0, 1] + 1e-12

    def test_too_few_groups_rejected(self):
        with pytest.raises(MetricError):
            friedman_nemenyi([[1, 2], [3, 4]])


class TestMetricsReport:
    def test_report_fields_and_save(self, tmp_path):
        rng = np.random.default_rng(13)
        scores = rng.uniform(0, 1, 40)
        labels = (scores + rng.normal(0, 0.2, 40) > 0.5).astype(int)
        labels[:2] = [0, 1]
        report = evaluate_predictions(scores, labels, n_draws=200, seed=0)
        assert 0 <= report.auroc <= 1 and 0 <= report.auprc <= 1
        assert report.n == 40
        assert report.n_positive == labels.sum()
        assert len(report.operating_points) == 4
        report.save(tmp_path / "m.json")
        import json

        payload = json.loads((tmp_path / "m.json").read_text())
        assert payload["auroc"] == report.auroc
        rows = report.table_rows()
        assert [r[0] for r in rows] == ["auroc", "auprc"]
