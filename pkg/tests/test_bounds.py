"""Detectability bound calculators and the Monte-Carlo CUSUM oracle."""

import math

import pytest
from scipy.stats import norm

from src.errors import ParameterError
from src.theory.bounds import (
    BoundInputs,
    bounds_table,
    coverage_upper_bound,
    early_detection_bound,
    mc_stopping_probability,
    snr_sufficient,
)


def test_snr_condition():
    assert snr_sufficient(BoundInputs(eta=1.0, t1=20, delta=0.1))
    assert not snr_sufficient(BoundInputs(eta=0.0, t1=20, delta=0.1))
    # threshold sqrt(2 ln 10 / 20) ~ 0.48
    assert not snr_sufficient(BoundInputs(eta=0.4, t1=20, delta=0.1))


def test_bound_values():
    inputs = BoundInputs(eta=1.0, t1=20, delta=0.1)
    expected = 1.0 - math.exp(-10.0 + math.sqrt(40.0 * math.log(10.0))) - 0.1
    assert early_detection_bound(inputs) == pytest.approx(expected)
    assert early_detection_bound(BoundInputs(eta=0.0, t1=20, delta=0.1)) == 0.0


def test_bound_monotone_in_eta():
    values = [early_detection_bound(BoundInputs(eta=e / 10, t1=30, delta=0.05)) for e in range(0, 21)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[-1] > 0.5


def test_positive_bound_implies_snr_condition():
    for eta in (0.2, 0.5, 0.8, 1.2):
        for t1 in (10, 20, 50):
            for delta in (0.01, 0.05, 0.1):
                inputs = BoundInputs(eta=eta, t1=t1, delta=delta)
                if early_detection_bound(inputs) > 0:
                    assert snr_sufficient(inputs), f"bound without SNR at {inputs}"


def test_coverage_bound_is_normal_tail():
    inputs = BoundInputs(eta=0.5, t1=25, delta=0.05, ell=10)
    assert coverage_upper_bound(inputs) == pytest.approx(norm.sf(1.0))
    assert coverage_upper_bound(BoundInputs(eta=0.5, t1=25, delta=0.05, ell=0)) == 0.5


def test_monte_carlo_respects_bound():
    rows = bounds_table([0.5, 1.0], [20, 50], [0.05, 0.1], n_samples=10_000, seed=3)

    assert len(rows) == 8
    for row in rows:
        assert row["coupling_violations"] == 0
        assert row["mc_estimate"] >= row["bound"] - 3 * row["mc_se"], row


def test_monte_carlo_is_seeded():
    inputs = BoundInputs(eta=0.3, t1=20, delta=0.05)
    a = mc_stopping_probability(inputs, n_samples=10_000, seed=1)
    b = mc_stopping_probability(inputs, n_samples=10_000, seed=1)
    assert a == b
    assert 0.0 <= a.estimate <= 1.0


def test_input_checks():
    with pytest.raises(ParameterError):
        mc_stopping_probability(BoundInputs(eta=1.0, t1=20, delta=0.1), n_samples=500)
    with pytest.raises(ParameterError):
        early_detection_bound(BoundInputs(eta=1.0, t1=20, delta=1.5))
    with pytest.raises(ParameterError):
        snr_sufficient(BoundInputs(eta=-1.0, t1=20, delta=0.1))
