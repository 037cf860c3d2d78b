import logging
import math
from unittest.mock import patch

import numpy as np
import pytest

from rrlab.errors import InvalidArgumentError
from rrlab.rejection import (
    RejectionScores,
    Stage,
    VerificationReport,
    arithmetic_bins,
    coupled_reject,
    coupled_stages,
    expected_sampled_accuracy,
    geometric_bins,
    nsub,
    optimal_rectifier,
    separation_bound,
    simplex_grid_violations,
    temperature_ordering_flip,
    verify_lemma1,
    verify_nsub,
    verify_ordering_flip,
    verify_theorem1,
    xi_bounds,
    xi_error,
    xi_min_batch,
)

log = logging.getLogger(__name__)


def test_scores_from_probs():
    scores = RejectionScores.from_probs([0.2, 0.7, 0.1], y=0, a_phi=0.5)
    assert scores.confidence == 0.7
    assert scores.tcon == 0.2
    assert scores.r_con == pytest.approx(0.35)
    assert not scores.correct
    assert RejectionScores.from_probs([0.2, 0.7, 0.1], y=1, a_phi=0.5).correct


def test_scores_reject_bad_input():
    with pytest.raises(InvalidArgumentError, match="label 3"):
        RejectionScores.from_probs([0.5, 0.5], y=3, a_phi=0.5)
    with pytest.raises(InvalidArgumentError, match="probability vector"):
        RejectionScores.from_probs([1.0], y=0, a_phi=0.5)


def test_optimal_rectifier():
    assert optimal_rectifier([0.1, 0.6, 0.3], 1) == 1.0
    assert optimal_rectifier([0.1, 0.6, 0.3], 2) == pytest.approx(0.5)


@pytest.mark.parametrize("a_phi, a_star, arith, geom, xi_min", [
    (0.4, 0.4, 0.0, 0.0, 0.0),
    (0.0, 0.3, 0.6, None, 0.6),
    (1.0, 0.2, 1.6, None, None),
    (0.5, 0.4, 0.2, 0.4, 0.2),
    (0.9, 0.6, 0.6, 2 - 2 / 1.5, 0.6),
    (0.9, 1.0, 0.2, 0.2, 0.2),
])
def test_xi_bounds_cases(a_phi, a_star, arith, geom, xi_min):
    result = xi_bounds(a_phi, a_star)
    assert result.xi_arith == pytest.approx(arith)
    assert result.xi_geom == (None if geom is None else pytest.approx(geom))
    assert result.xi_min == (None if xi_min is None else pytest.approx(xi_min))


def test_xi_bounds_rejects_out_of_range_rectifier():
    with pytest.raises(InvalidArgumentError, match="a_phi"):
        xi_bounds(1.2, 0.5)


def _grid_xi_min(a_phi, a_star, grid):
    """Smallest grid xi meeting either error condition, by direct search."""
    for xi in grid:
        geometric = a_phi > 0 and a_star > 0 and abs(math.log(a_phi / a_star)) <= math.log(2 / (2 - xi))
        arithmetic = abs(a_phi - a_star) <= xi / 2
        if geometric or arithmetic:
            return xi
    return None


def test_xi_min_agrees_with_grid_search():
    rng = np.random.default_rng(0)
    grid = np.arange(10_000) / 10_000
    for _ in range(200):
        a_phi, a_star = rng.uniform(0, 1, size=2)
        expected = _grid_xi_min(a_phi, a_star, grid)
        got = xi_bounds(a_phi, a_star).xi_min
        if expected is None:
            assert got is None or got > grid[-1] - 1e-12
        else:
            assert got is not None
            assert got - 1e-12 <= expected <= got + 1e-4 + 1e-12


def test_xi_min_batch_matches_scalar():
    rng = np.random.default_rng(1)
    a_phi = rng.uniform(0, 1, size=300)
    a_star = rng.uniform(0, 1.5, size=300)
    batch = xi_min_batch(a_phi, a_star)
    for a, s, b in zip(a_phi, a_star, batch):
        scalar = xi_bounds(a, s).xi_min
        if scalar is None:
            assert np.isnan(b)
        else:
            assert b == pytest.approx(scalar)


def test_xi_error_uses_optimal_rectifier():
    result = xi_error(0.5, [0.2, 0.8], 0)
    assert result.a_star == pytest.approx(0.25)
    assert result.xi_geom is None
    assert result.xi_min == pytest.approx(0.5)


def test_coupled_reject_stages():
    xi = 0.2
    assert coupled_reject(RejectionScores(0.9, 0.9, 0.7, 0.63, True), xi).stage is Stage.ACCEPTED
    assert coupled_reject(RejectionScores(0.9, 0.05, 0.5, 0.45, False), xi).stage is Stage.FLAGGED_BY_RCON
    decision = coupled_reject(RejectionScores(0.55, 0.55, 1.0, 0.55, True), xi)
    assert decision.stage is Stage.REJECTED_BY_CONFIDENCE
    assert decision.confidence_threshold == pytest.approx(1 / 1.8)
    assert decision.rcon_threshold == 0.5


def test_coupled_reject_at_zero_xi_filters_at_half():
    assert coupled_reject(RejectionScores(0.5, 0.5, 1.0, 0.5, True), 0.0).stage is Stage.REJECTED_BY_CONFIDENCE
    assert coupled_reject(RejectionScores(0.51, 0.51, 1.0, 0.51, True), 0.0).stage is Stage.ACCEPTED


@pytest.mark.parametrize("xi", [-0.1, 1.0])
def test_coupled_reject_xi_range(xi):
    with pytest.raises(InvalidArgumentError, match="xi must lie"):
        coupled_reject(RejectionScores(0.9, 0.9, 1.0, 0.9, True), xi)


def test_coupled_stages_match_scalar_rule():
    rng = np.random.default_rng(2)
    conf = rng.uniform(0.3, 1.0, size=200)
    a_phi = rng.uniform(0, 1, size=200)
    xi = rng.uniform(0, 0.99, size=200)
    stages = coupled_stages(conf, conf * a_phi, xi)
    for c, a, x, stage in zip(conf, a_phi, xi, stages):
        assert coupled_reject(RejectionScores(c, c, a, c * a, True), x).stage is stage


def test_separation_bound():
    assert separation_bound(0.0) == 0.5
    assert separation_bound(0.5) == pytest.approx(1 / 2.25)
    grid = np.linspace(0, 0.999, 1000)
    assert np.all(np.diff(separation_bound(grid)) < 0)


def test_lemma1_holds():
    report = verify_lemma1(20_000, seed=0, grid_resolution=200)
    log.info(report.to_text())
    assert report.passed
    assert report.branches["correct"] + report.branches["wrong"] == 20_000
    assert report.branches["correct"] > 1_000
    assert report.branches["wrong"] > 10_000
    assert report.branches["boundary"] == 1
    assert report.margins["correct"] > 0
    assert report.branches["simplex_grid"] > 0
    assert report.margins["wrong"] > 0


def test_lemma1_fault_is_caught():
    report = verify_lemma1(1_000, seed=0, fault=True, grid_resolution=0)
    assert not report.passed
    assert len(report.counterexamples) == 5
    assert "FAIL" in report.to_text()


def test_lemma1_scores_through_tcon():
    with patch("rrlab.rejection.tcon", return_value=0.0) as scored:
        report = verify_lemma1(500, seed=0, grid_resolution=0)
    assert scored.call_count == 501
    assert not report.passed
    assert report.violations >= report.branches["correct"] > 0


def test_lemma1_samples_full_probability_vectors():
    seen = []
    real = RejectionScores.from_probs.__func__

    def recording(cls, probs, y, a_phi):
        seen.append((np.asarray(probs).copy(), y))
        return real(cls, probs, y, a_phi)

    with patch.object(RejectionScores, "from_probs", classmethod(recording)):
        verify_lemma1(2_000, seed=3, grid_resolution=0)
    sizes = {p.size for p, _ in seen[:-1]}
    assert sizes == set(range(2, 11))
    for p, y in seen[:-1]:
        assert p.sum() == pytest.approx(1.0)
        assert p.max() > 0.5 + 1e-9 - 1e-15
        assert 0 <= y < p.size


def test_theorem1_holds_on_every_branch():
    report = verify_theorem1(20_000, seed=1, grid_points=1_000)
    log.info(report.to_text())
    assert report.passed
    for branch in ("correct-i", "correct-ii", "wrong-i", "wrong-ii"):
        assert report.branches[branch] == 20_000
        assert report.margins[branch] > 0
    assert report.branches["g_grid"] == 1_000


def test_theorem1_at_zero_xi():
    assert verify_theorem1(5_000, seed=2, xi=0.0, grid_points=10).passed


def test_theorem1_fault_is_caught():
    report = verify_theorem1(1_000, seed=0, fault=True, grid_points=10)
    assert not report.passed
    assert report.counterexamples


def test_single_trial_touches_each_branch_once():
    report = verify_theorem1(1, seed=0, grid_points=10)
    assert [report.branches[b] for b in ("correct-i", "correct-ii", "wrong-i", "wrong-ii")] == [1, 1, 1, 1]
    lemma = verify_lemma1(1, seed=0, grid_resolution=0)
    assert lemma.branches["correct"] + lemma.branches["wrong"] == 1


def test_zero_trials_rejected():
    with pytest.raises(InvalidArgumentError, match="trials"):
        verify_lemma1(0, seed=0)


def test_verifiers_are_deterministic():
    a = verify_theorem1(3_000, seed=5, grid_points=10)
    b = verify_theorem1(3_000, seed=5, grid_points=10)
    assert a.margins == b.margins


def test_simplex_grid():
    checked, violations = simplex_grid_violations(60)
    assert checked > 0
    assert violations == 0


def test_substitute_class_counts():
    assert nsub(0.1, 0.01).n_sub == 20
    counts = nsub(0.5, 0.01)
    assert counts.n2 == 4
    assert counts.n1 == pytest.approx(17.01, abs=0.01)
    assert counts.n_sub == 4
    counts = nsub(0.2, 0.5)
    assert counts.n1 == pytest.approx(7.58, abs=0.01)
    assert counts.n2 == pytest.approx(10)
    assert counts.n_sub == 8


@pytest.mark.parametrize("xi, rho", [(0.0, 0.5), (1.0, 0.5), (0.5, 0.0), (0.5, 1.0)])
def test_nsub_ranges(xi, rho):
    with pytest.raises(InvalidArgumentError):
        nsub(xi, rho)


@pytest.mark.parametrize("xi, rho", [(0.1, 0.01), (0.5, 0.01), (0.37, 0.2), (0.9, 0.7)])
def test_bins_count_matches_formulas(xi, rho):
    counts = nsub(xi, rho)
    geo = geometric_bins(xi, rho)
    ari = arithmetic_bins(xi)
    assert len(geo) - 1 == math.ceil(counts.n1)
    assert len(ari) - 1 == math.ceil(counts.n2)
    assert geo[0] == ari[0] == 0.0
    assert geo[-1] == ari[-1] == 1.0
    assert all(b > a for a, b in zip(geo, geo[1:]))


def test_nsub_verifier():
    report = verify_nsub(1_000, seed=0)
    assert report.passed
    assert report.branches == {"geometric": 1_000, "arithmetic": 1_000}


def test_temperature_ordering_flip_values():
    tcon_case, conf_case = temperature_ordering_flip()
    assert tcon_case.low_tau == pytest.approx((1 / (1 + math.e**3), 1 / (1 + 2 * math.e**2)))
    assert tcon_case.high_tau == pytest.approx((1 / (1 + math.e**1.5), 1 / (1 + 2 * math.e)))
    assert tcon_case.low_tau[0] == pytest.approx(0.047426, abs=1e-6)
    assert tcon_case.high_tau == pytest.approx((0.182426, 0.155362), abs=1e-6)
    assert conf_case.low_tau == pytest.approx((0.731059, 0.786986), abs=1e-6)
    assert conf_case.high_tau == pytest.approx((0.622459, 0.576117), abs=1e-6)
    assert tcon_case.flipped and conf_case.flipped


def test_ordering_flip_verifier():
    report = verify_ordering_flip()
    assert report.passed
    assert report.branches == {"tcon": 1, "confidence": 1}


def test_no_flip_when_temperatures_swap():
    assert not any(f.flipped for f in temperature_ordering_flip(low_tau=2.0, high_tau=1.0))


def test_expected_sampled_accuracy():
    assert expected_sampled_accuracy([[0.7, 0.3], [0.4, 0.6]], [0, 0]) == pytest.approx(0.55)
    with pytest.raises(InvalidArgumentError):
        expected_sampled_accuracy(np.zeros((0, 2)), [])
    with pytest.raises(InvalidArgumentError, match="out of range"):
        expected_sampled_accuracy([[0.5, 0.5]], [2])


def test_report_merge_caps_counterexamples():
    report = VerificationReport(name="x", trials=2)
    for i in range(4):
        part = VerificationReport(
            name="x", trials=1, violations=2, branches={"a": 1}, margins={"a": float(i)},
            counterexamples=[{"i": i}, {"i": i}],
        )
        report.merge(part)
    assert report.violations == 8
    assert report.branches == {"a": 4}
    assert report.margins == {"a": 0.0}
    assert len(report.counterexamples) == 5
