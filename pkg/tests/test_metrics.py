"""Tests for pyoodbench.metrics — AUROC, AUCPR, ECE, accuracy and evaluate()."""

import math

import numpy as np
import pytest
from sklearn.metrics import average_precision_score, roc_auc_score

from pyoodbench.errors import DomainError, ParameterError, UndefinedMetricError, UsageError
from pyoodbench.metrics import EvalReport, aucpr, auroc, ece, evaluate, id_accuracy
from pyoodbench.scores import ScoredSample


def _samples(id_scores, ood_scores, method="mcp"):
    out = [ScoredSample(i, method, float(s), False, 0) for i, s in enumerate(id_scores)]
    start = len(out)
    out += [ScoredSample(start + i, method, float(s), True, 0) for i, s in enumerate(ood_scores)]
    return out


def _pair_count(id_scores, ood_scores):
    ids = np.asarray(id_scores)[:, None]
    oods = np.asarray(ood_scores)[None, :]
    return float(np.mean((oods < ids) + 0.5 * (oods == ids)))


def _exhaustive_ap(id_scores, ood_scores):
    detector = -np.concatenate([id_scores, ood_scores])
    positive = np.r_[np.zeros(len(id_scores), bool), np.ones(len(ood_scores), bool)]
    ap, last_recall = 0.0, 0.0
    for t in np.unique(detector)[::-1]:
        flagged = detector >= t
        tp = np.sum(flagged & positive)
        recall = tp / positive.sum()
        ap += (recall - last_recall) * tp / flagged.sum()
        last_recall = recall
    return ap


def _random_set(rng):
    n_id = int(rng.integers(1, 100))
    n_ood = int(rng.integers(1, 100))
    if rng.random() < 0.3:
        # Heavy ties: a handful of distinct values.
        levels = rng.normal(size=int(rng.integers(1, 5)))
        return rng.choice(levels, n_id), rng.choice(levels, n_ood)
    return rng.normal(size=n_id), rng.normal(0.5, 1.0, size=n_ood)


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------


class TestAuroc:
    """Tests for auroc."""

    def test_perfect_separation(self):
        """Verify ID {0.9, 0.8} vs OOD {0.1, 0.2} gives 1.0."""
        assert auroc(_samples([0.9, 0.8], [0.1, 0.2])) == 1.0

    def test_all_ties(self):
        """Verify equal scores give 0.5."""
        assert auroc(_samples([0.3] * 4, [0.3] * 6)) == 0.5

    def test_inverted(self):
        """Verify OOD scored above every ID sample gives 0.0."""
        assert auroc(_samples([0.1], [0.9, 0.8])) == 0.0

    def test_matches_pair_count(self):
        """Verify 1000 seeded sets against the O(n^2) pair count, ties included."""
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            id_scores, ood_scores = _random_set(rng)
            value = auroc(_samples(id_scores, ood_scores))
            assert value == pytest.approx(_pair_count(id_scores, ood_scores), abs=1e-12)

    def test_matches_sklearn(self):
        """Verify agreement with scikit-learn on the OOD-positive orientation."""
        rng = np.random.default_rng(5)
        id_scores, ood_scores = rng.normal(size=80), rng.normal(0.7, 1.0, size=60)
        y = np.r_[np.zeros(80), np.ones(60)]
        expected = roc_auc_score(y, -np.r_[id_scores, ood_scores])
        assert auroc(_samples(id_scores, ood_scores)) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("transform", [np.exp, lambda s: 3.0 * s - 7.0])
    def test_monotone_transform_invariance(self, transform):
        """Verify strictly increasing transforms leave AUROC unchanged."""
        rng = np.random.default_rng(7)
        id_scores, ood_scores = rng.normal(size=50), rng.normal(0.3, 1.0, size=40)
        base = auroc(_samples(id_scores, ood_scores))
        moved = auroc(_samples(transform(id_scores), transform(ood_scores)))
        assert moved == pytest.approx(base, abs=1e-12)

    def test_label_swap_with_negation(self):
        """Verify swapping ID/OOD and negating scores leaves AUROC unchanged."""
        rng = np.random.default_rng(8)
        id_scores, ood_scores = rng.normal(size=30), rng.normal(size=45)
        assert auroc(_samples(-ood_scores, -id_scores)) == pytest.approx(
            auroc(_samples(id_scores, ood_scores)), abs=1e-12
        )

    @pytest.mark.parametrize("ood", [True, False])
    def test_single_class(self, ood):
        """Verify a single-class input is undefined."""
        samples = [ScoredSample(i, "mcp", 0.5, ood, 0) for i in range(3)]
        with pytest.raises(UndefinedMetricError, match="at least one ID and one OOD"):
            auroc(samples)


# ---------------------------------------------------------------------------
# AUCPR
# ---------------------------------------------------------------------------


class TestAucpr:
    """Tests for aucpr."""

    def test_perfect_separation(self):
        """Verify perfect separation gives 1.0."""
        assert aucpr(_samples([0.9, 0.8], [0.1, 0.2])) == 1.0

    @pytest.mark.parametrize("n_id, n_ood", [(3, 1), (5, 5), (1, 9)])
    def test_all_ties_equal_prevalence(self, n_id, n_ood):
        """Verify a single threshold group gives AP equal to the OOD prevalence."""
        value = aucpr(_samples([0.4] * n_id, [0.4] * n_ood))
        assert value == pytest.approx(n_ood / (n_id + n_ood), abs=1e-15)

    def test_matches_exhaustive_thresholds(self):
        """Verify 1000 seeded sets against a brute force over distinct thresholds."""
        rng = np.random.default_rng(99)
        for _ in range(1000):
            id_scores, ood_scores = _random_set(rng)
            value = aucpr(_samples(id_scores, ood_scores))
            assert value == pytest.approx(_exhaustive_ap(id_scores, ood_scores), abs=1e-12)

    def test_matches_sklearn(self):
        """Verify agreement with scikit-learn's average precision, ties included."""
        rng = np.random.default_rng(3)
        id_scores = rng.integers(0, 6, 70).astype(float)
        ood_scores = rng.integers(0, 4, 50).astype(float)
        y = np.r_[np.zeros(70), np.ones(50)]
        expected = average_precision_score(y, -np.r_[id_scores, ood_scores])
        assert aucpr(_samples(id_scores, ood_scores)) == pytest.approx(expected, abs=1e-12)

    def test_monotone_detector_beats_prevalence(self):
        """Verify a detector that ranks most OOD first scores above the prevalence."""
        value = aucpr(_samples([0.9, 0.8, 0.3, 0.7], [0.1, 0.2, 0.85]))
        assert value >= 3 / 7

    def test_single_class(self):
        """Verify a single-class input is undefined."""
        with pytest.raises(UndefinedMetricError):
            aucpr(_samples([0.1, 0.2], []))


# ---------------------------------------------------------------------------
# ECE
# ---------------------------------------------------------------------------


class TestEce:
    """Tests for ece and the reliability bins."""

    def test_confident_and_correct(self):
        """Verify confidence 1.0 everywhere with all correct gives 0."""
        value, bins = ece([1.0] * 10, [True] * 10)
        assert value == 0.0
        assert bins.bins[-1].count == 10

    def test_single_bin_closed_form(self):
        """Verify confidence 0.8 with 60% correct gives 0.2."""
        value, _ = ece([0.8] * 10, [True] * 6 + [False] * 4)
        assert value == pytest.approx(0.2, abs=1e-15)

    def test_exactly_calibrated_bins(self):
        """Verify bins whose accuracy equals their mean confidence give 0."""
        conf = [0.25] * 4 + [0.75] * 4
        correct = [True, False, False, False, True, True, True, False]
        assert ece(conf, correct, n_bins=10)[0] == 0.0

    def test_calibrated_stream(self):
        """Verify a seeded perfectly calibrated stream of 1e5 predictions stays below 0.01."""
        rng = np.random.default_rng(0)
        conf = rng.uniform(size=100_000)
        value, _ = ece(conf, rng.uniform(size=conf.size) < conf)
        assert value <= 0.01

    def test_bins_partition(self):
        """Verify bin edges tile [0, 1], counts sum to N and empty bins carry no values."""
        conf = [0.0, 0.05, 0.5, 0.999, 1.0]
        _, bins = ece(conf, [True] * 5, n_bins=4)
        assert [b.lower for b in bins.bins] == [0.0, 0.25, 0.5, 0.75]
        assert bins.bins[-1].upper == 1.0
        assert bins.total == 5
        assert [b.count for b in bins.bins] == [2, 0, 1, 2]
        assert bins.bins[1].accuracy is None and bins.bins[1].mean_confidence is None
        assert bins.to_rows()[1] == {
            "bin_lower": 0.25, "bin_upper": 0.5, "mean_conf": None, "accuracy": None, "count": 0,
        }

    def test_errors(self):
        """Verify empty, mismatched, out-of-range and zero-bin inputs are rejected."""
        with pytest.raises(UsageError, match="at least one"):
            ece([], [])
        with pytest.raises(UsageError, match="correctness"):
            ece([0.5, 0.5], [True])
        with pytest.raises(DomainError, match=r"\[0, 1\]"):
            ece([1.5], [True])
        with pytest.raises(ParameterError, match="n_bins"):
            ece([0.5], [True], n_bins=0)


# ---------------------------------------------------------------------------
# Accuracy and evaluate
# ---------------------------------------------------------------------------


class TestIdAccuracy:
    """Tests for id_accuracy."""

    @pytest.mark.parametrize(
        "pred, true, expected",
        [([0, 1, 2], [0, 1, 2], 1.0), ([1, 0], [0, 1], 0.0), ([0, 1, 1, 0], [0, 1, 1, 1], 0.75)],
    )
    def test_values(self, pred, true, expected):
        """Verify the fraction of exact matches."""
        assert id_accuracy(pred, true) == expected

    def test_errors(self):
        """Verify mismatched and empty inputs are usage errors."""
        with pytest.raises(UsageError):
            id_accuracy([0, 1], [0])
        with pytest.raises(UsageError):
            id_accuracy([], [])


class TestEvaluate:
    """Tests for evaluate and EvalReport."""

    def _mixed(self):
        return [
            ScoredSample(0, "mcp", 0.9, False, 1, 1, 0.9),
            ScoredSample(1, "mcp", 0.7, False, 0, 1, 0.7),
            ScoredSample(2, "mcp", 0.6, False, 0, 0, 0.6),
            ScoredSample(3, "mcp", 0.95, False, 1, 1, 0.95),
            ScoredSample(4, "mcp", 0.5, True, 0, None, 0.5),
            ScoredSample(5, "mcp", 0.8, True, 1, None, 0.8),
        ]

    def test_report(self):
        """Verify each field against the standalone metric functions."""
        samples = self._mixed()
        report, bins = evaluate(samples, n_bins=10, fingerprint="abc")
        id_samples = samples[:4]
        assert report.method == "mcp"
        assert report.n_id == 4 and report.n_ood == 2
        assert report.id_accuracy == 0.75
        assert report.auroc == auroc(samples)
        assert report.aucpr == aucpr(samples)
        assert report.ece == ece([s.confidence for s in id_samples],
                                 [s.predicted_class == s.true_class for s in id_samples], 10)[0]
        assert report.config_fingerprint == "abc"
        assert bins.total == 4

    def test_ranges(self):
        """Verify every metric lies in [0, 1]."""
        report, _ = evaluate(self._mixed())
        for value in (report.auroc, report.aucpr, report.id_accuracy, report.ece):
            assert 0.0 <= value <= 1.0 and math.isfinite(value)

    def test_dict_round_trip(self):
        """Verify EvalReport.from_dict inverts to_dict."""
        report, _ = evaluate(self._mixed())
        assert EvalReport.from_dict(report.to_dict()) == report

    def test_mixed_methods(self):
        """Verify samples of several methods need an explicit method tag."""
        samples = self._mixed()
        samples[0] = ScoredSample(0, "odin", 0.9, False, 1, 1, 0.9)
        with pytest.raises(UsageError, match="mix methods"):
            evaluate(samples)
        assert evaluate(samples, method="odin")[0].method == "odin"

    def test_id_without_label(self):
        """Verify an unlabeled ID sample is a usage error."""
        samples = self._mixed()
        samples[0] = ScoredSample(0, "mcp", 0.9, False, 1, None, 0.9)
        with pytest.raises(UsageError, match="true_class"):
            evaluate(samples)


# ---------------------------------------------------------------------------
# Input order
# ---------------------------------------------------------------------------


class TestPermutationInvariance:
    """Tests that no metric depends on the order of its inputs."""

    def test_detection_metrics(self):
        """Verify AUROC and AUCPR are unchanged under shuffles of tied score sets."""
        rng = np.random.default_rng(77)
        for _ in range(200):
            id_s, ood_s = _random_set(rng)
            samples = _samples(id_s, ood_s)
            expected = (auroc(samples), aucpr(samples))
            for _ in range(5):
                shuffled = [samples[i] for i in rng.permutation(len(samples))]
                assert (auroc(shuffled), aucpr(shuffled)) == expected

    def test_calibration_and_accuracy(self):
        """Verify ECE, its bins and ID accuracy are unchanged under shuffles."""
        rng = np.random.default_rng(78)
        for _ in range(50):
            n = int(rng.integers(1, 200))
            conf = rng.choice(np.linspace(0.0, 1.0, 11), n)
            pred = rng.integers(0, 3, n)
            true = rng.integers(0, 3, n)
            value, bins = ece(conf, pred == true, n_bins=7)
            accuracy = id_accuracy(pred, true)
            for _ in range(5):
                order = rng.permutation(n)
                assert ece(conf[order], (pred == true)[order], n_bins=7) == (value, bins)
                assert id_accuracy(pred[order], true[order]) == accuracy
