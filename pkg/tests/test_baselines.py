"""
Tests for the comparison detectors.

The BOCPD run-length posterior is checked against an exhaustive sum over
segmentations using the closed-form Normal-Inverse-Gamma evidence.
"""

import itertools
import math

import numpy as np
import pytest
from scipy.special import gammaln, logsumexp

from src.detect.baselines import (
    BocpdState,
    NigPrior,
    bocpd_detect,
    bocpd_run_length_posteriors,
    calibrate_cusum_h,
    cusum_detect,
    cusum_statistic,
    hmm_posterior_detect,
    imbalance_detect,
    percentile_threshold,
    volatility_detect,
)
from src.errors import ParameterError


# --- CUSUM -------------------------------------------------------------------


def test_cusum_step_change():
    y = np.r_[np.zeros(50), np.full(50, 10.0)]
    alarms = cusum_detect(y, mu0=0.0, k_ref=5.0, h=20.0)
    # +5 per step from t=50; 25 > 20 first at t=54, then reset
    assert alarms[:2] == [54, 59]


def test_cusum_linear_drift():
    y = 0.1 * np.arange(40)
    # C_t = 0.05 t^2, first above 1 at t=5
    assert cusum_detect(y, mu0=0.0, k_ref=0.05, h=1.0)[0] == 5


def test_cusum_constant_series_is_silent():
    assert cusum_detect(np.full(500, 3.0), mu0=3.0, k_ref=0.5, h=2.0) == []
    assert np.all(cusum_statistic(np.full(10, 3.0), 3.0, 0.5) == 0.0)


def test_cusum_start_and_suppression():
    y = np.r_[np.zeros(10), np.full(60, 10.0)]
    alarms = cusum_detect(y, mu0=0.0, k_ref=5.0, h=20.0, suppression=10, start=20)
    assert alarms[0] >= 20
    assert all(b - a > 10 for a, b in zip(alarms, alarms[1:]))


def test_cusum_bad_threshold():
    with pytest.raises(ParameterError):
        cusum_detect([1.0, 2.0], 0.0, 0.5, h=0.0)


def test_cusum_h_calibration_floor():
    # statistic never positive -> h falls back to k_ref
    assert calibrate_cusum_h(np.zeros(100), mu0=0.0, k_ref=0.7, percentile=85) == 0.7

    rng = np.random.default_rng(0)
    h = calibrate_cusum_h(rng.normal(0, 1, 2000), mu0=0.0, k_ref=0.5, percentile=85)
    assert h >= 0.5


# --- BOCPD -------------------------------------------------------------------


def _log_evidence(x, prior: NigPrior) -> float:
    """Closed-form log marginal likelihood of one segment under the NIG prior."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    xbar = x.mean()
    kappa_n = prior.kappa0 + n
    alpha_n = prior.alpha0 + n / 2.0
    beta_n = (
        prior.beta0
        + 0.5 * np.sum((x - xbar) ** 2)
        + prior.kappa0 * n * (xbar - prior.mu0) ** 2 / (2.0 * kappa_n)
    )
    return float(
        gammaln(alpha_n)
        - gammaln(prior.alpha0)
        + prior.alpha0 * np.log(prior.beta0)
        - alpha_n * np.log(beta_n)
        + 0.5 * np.log(prior.kappa0 / kappa_n)
        - n / 2.0 * np.log(2.0 * np.pi)
    )


def _brute_force_run_length(x, hazard, prior):
    """P(run length | x) after the last point, summing over all segmentations."""
    m = len(x)
    totals = np.full(m, -np.inf)
    for cuts in itertools.product((False, True), repeat=m - 1):
        starts = [0] + [i + 1 for i, c in enumerate(cuts) if c]
        bounds = starts + [m]
        logw = sum(cuts) * math.log(hazard) + (m - 1 - sum(cuts)) * math.log1p(-hazard)
        logw += sum(_log_evidence(x[a:b], prior) for a, b in zip(bounds, bounds[1:]))
        r = m - 1 - starts[-1]
        totals[r] = np.logaddexp(totals[r], logw)
    return np.exp(totals - logsumexp(totals))


def test_bocpd_matches_exhaustive_segmentation():
    rng = np.random.default_rng(12)
    x = np.r_[rng.normal(0, 1, 5), rng.normal(3, 0.5, 5)]
    prior = NigPrior(mu0=0.5, kappa0=1.0, alpha0=2.0, beta0=1.5)
    hazard = 0.2

    posteriors = bocpd_run_length_posteriors(x, hazard, prior)
    for t, post in enumerate(posteriors):
        expected = _brute_force_run_length(x[: t + 1], hazard, prior)
        assert len(post) == t + 1
        assert np.allclose(post, expected, atol=1e-8), f"run-length posterior differs at t={t}"


def test_bocpd_posterior_is_normalised_and_truncated():
    rng = np.random.default_rng(1)
    posteriors = bocpd_run_length_posteriors(rng.normal(0, 1, 30), 0.05, NigPrior(), max_run=8)

    for post in posteriors:
        assert abs(post.sum() - 1.0) < 1e-9
        assert np.all(post >= 0)
        assert len(post) <= 8


def test_bocpd_first_update():
    state = BocpdState(prior=NigPrior(), hazard=0.1)
    assert state.update(0.3) == 1.0
    assert np.array_equal(state.posterior, [1.0])


def test_bocpd_hazard_near_one():
    rng = np.random.default_rng(2)
    state = BocpdState(prior=NigPrior(), hazard=1.0 - 1e-6)
    state.update(0.0)
    for x in rng.normal(0, 1, 50):
        assert state.update(float(x)) > 0.99


def test_bocpd_detects_mean_shift():
    x = np.r_[np.zeros(5), np.full(5, 10.0)]
    alarms = bocpd_detect(x, hazard=0.035, alarm_threshold=0.5, prior=NigPrior(0.0, 1.0, 1.0, 0.02))

    assert alarms, "expected an alarm after the shift"
    assert 5 <= alarms[0] <= 7


def test_bocpd_quiet_on_stationary_noise():
    rng = np.random.default_rng(7)
    x = rng.normal(0, 1, 10_000)
    alarms = bocpd_detect(x, hazard=1e-3, alarm_threshold=0.5, prior=NigPrior(0.0, 1.0, 1.0, 1.0))
    assert len(alarms) <= 1


def test_bocpd_argument_checks():
    with pytest.raises(ParameterError):
        bocpd_detect([0.0, 1.0], hazard=1.0, alarm_threshold=0.5, prior=NigPrior())
    with pytest.raises(ParameterError):
        bocpd_detect([0.0, 1.0], hazard=0.1, alarm_threshold=0.0, prior=NigPrior())


# --- Level detectors -----------------------------------------------------------------


def test_hmm_posterior_alarm():
    assert hmm_posterior_detect(np.array([[0.4, 0.35, 0.25]]), 0.55) == [0]
    assert hmm_posterior_detect(np.array([[0.5, 0.3, 0.2]]), 0.55) == []
    # stable state is configurable
    assert hmm_posterior_detect(np.array([[0.1, 0.85, 0.05]]), 0.55, stable_state=1) == []


def test_imbalance_spike():
    imb = np.r_[np.full(10, 0.1), [-0.9], np.full(5, 0.1)]
    assert imbalance_detect(imb, 0.5) == [10]


def test_volatility_step_with_suppression():
    vol = np.r_[np.ones(20), np.full(10, 4.0)]
    assert volatility_detect(vol, 2.0, suppression=5) == [20, 26]
    assert volatility_detect(vol, 2.0, suppression=5, start=22) == [22, 28]


def test_percentile_threshold_bounds():
    values = np.r_[np.arange(1, 101, dtype=float), np.nan]
    assert percentile_threshold(values, 85) == 85.0
    assert percentile_threshold(values, 85, upper=50.0) == 50.0
    assert percentile_threshold(np.zeros(10), 85, lower=1e-6) == 1e-6


def test_cusum_h_ignores_out_of_control_rows():
    rng = np.random.default_rng(1)
    y = np.r_[rng.normal(0, 1, 500), 0.5 * np.arange(100)]
    in_control = np.r_[np.ones(500, dtype=bool), np.zeros(100, dtype=bool)]

    loose = calibrate_cusum_h(y, mu0=0.0, k_ref=0.5, percentile=85)
    tight = calibrate_cusum_h(y, mu0=0.0, k_ref=0.5, percentile=85, in_control=in_control)
    assert tight == calibrate_cusum_h(y[:500], mu0=0.0, k_ref=0.5, percentile=85)
    assert tight < loose / 10


def test_percentile_threshold_reference_floor():
    values = np.arange(1, 101, dtype=float)
    assert percentile_threshold(values, 85, reference_percentile=99) == 99.0
    expected = 99.0 + 2.5 * np.std(values)
    assert percentile_threshold(values, 85, reference_percentile=99, margin=2.5) == pytest.approx(expected)
    assert percentile_threshold(values, 85, upper=50.0, reference_percentile=99, margin=2.5) == 50.0
