"""
Trigger detector tests.

The firing loop is checked on hand-built composite traces so the expected
threshold at every step can be recomputed from the scores directly.
"""

import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from src.config.load import dgp_params_from_config, load_config
from src.data.dgp import RegimeLabel, emit_observations, extract_episodes, regime_reference_means, simulate_run
from src.detect.trigger import (
    DetectorTrace,
    EmpiricalQuantile,
    TriggerConfig,
    TriggerVariant,
    adaptive_threshold,
    fire_triggers,
    rescore,
    rising_edge_fire,
    run_detector,
)
from src.errors import ParameterError
from src.eval.metrics import StressEvent, conditional_breakdown, cumulative_snr, episode_snr, match_triggers
from src.features.channels import ChannelNormalizer, SignalConfig
from src.models.hmm import HmmModel


def _trace(composite, normed=None):
    composite = np.asarray(composite, dtype=float)
    if normed is None:
        normed = pd.DataFrame({c: composite for c in ("ent", "dep", "spr", "ofi")})
    return DetectorTrace(
        posteriors=None,
        raw=normed,
        normed=normed,
        composite=composite,
        first_channel=np.array(["ent"] * len(composite), dtype=object),
        normalizer=None,
    )


def test_quantile_of_one_to_hundred():
    assert adaptive_threshold(list(range(1, 101)), 85) == 85
    assert adaptive_threshold(list(range(1, 101)), 50) == 50


def test_quantile_edge_cases():
    assert adaptive_threshold([4.2], 85) == 4.2
    assert adaptive_threshold([], 85) == math.inf


def test_quantile_cap_evicts_oldest():
    q = EmpiricalQuantile(100.0, cap=3)
    q.extend([10.0, 1.0, 2.0, 3.0])

    assert len(q) == 3
    assert q.value() == 3.0, "10 was the oldest and should be gone"


def test_rising_edge_rule():
    assert rising_edge_fire(0.9, 0.8, 0.85, t=10, t_last=None, L=5)
    assert not rising_edge_fire(0.9, 0.95, 0.85, t=10, t_last=None, L=5), "falling score"
    assert not rising_edge_fire(0.8, 0.7, 0.85, t=10, t_last=None, L=5), "below threshold"
    assert not rising_edge_fire(0.85, 0.7, 0.85, t=10, t_last=None, L=5), "must be strictly above"
    assert not rising_edge_fire(0.9, 0.8, 0.85, t=10, t_last=5, L=5), "gap equal to L is suppressed"
    assert rising_edge_fire(0.9, 0.8, 0.85, t=11, t_last=5, L=5)
    # slope check off (ablation)
    assert rising_edge_fire(0.9, 0.95, 0.85, t=10, t_last=None, L=5, rising_edge=False)


def _noisy_scores(n=600, seed=0):
    rng = np.random.default_rng(seed)
    return np.abs(rng.normal(0, 1, n)) + 0.3 * np.sin(np.arange(n) / 15.0)


def test_adaptive_threshold_uses_only_past_scores():
    s = _noisy_scores()
    cfg = TriggerConfig(percentile=85, suppression=10, burn_in=200)
    events = fire_triggers(_trace(s), cfg)

    assert events, "expected some triggers on noisy scores"
    for e in events:
        assert e.threshold == adaptive_threshold(s[: e.tau].tolist(), 85)
        assert e.score > e.threshold
        assert e.score > e.prev_score
        assert e.tau >= 200


def test_firing_loop_matches_rule_step_by_step():
    s = _noisy_scores(seed=4)
    cfg = TriggerConfig(percentile=90, suppression=7, burn_in=150)
    fired = [e.tau for e in fire_triggers(_trace(s), cfg)]

    expected, last = [], None
    for t in range(150, len(s)):
        theta = adaptive_threshold(s[:t].tolist(), 90)
        if rising_edge_fire(s[t], s[t - 1], theta, t, last, 7):
            expected.append(t)
            last = t
    assert fired == expected


def test_suppression_spacing():
    s = _noisy_scores(seed=1)
    cfg = TriggerConfig(percentile=70, suppression=25, burn_in=100)
    taus = [e.tau for e in fire_triggers(_trace(s), cfg)]

    assert len(taus) >= 2
    assert all(b - a > 25 for a, b in zip(taus, taus[1:]))


def test_standard_threshold_is_frozen():
    s = _noisy_scores(seed=2)
    cfg = TriggerConfig(percentile=85, suppression=10, burn_in=200, variant=TriggerVariant.STANDARD)
    events = fire_triggers(_trace(s), cfg)

    frozen = adaptive_threshold(s[:200].tolist(), 85)
    assert events
    assert all(e.threshold == frozen for e in events)
    assert all(e.variant == "standard" for e in events)


def test_update_interval_holds_threshold():
    s = _noisy_scores(seed=6)
    cfg = TriggerConfig(percentile=85, suppression=5, burn_in=100, threshold_update_interval=50)
    for e in fire_triggers(_trace(s), cfg):
        refreshed_at = 100 + ((e.tau - 100) // 50) * 50
        assert e.threshold == adaptive_threshold(s[:refreshed_at].tolist(), 85)


def test_multi_attributes_the_crossing_channel():
    n = 300
    quiet = np.zeros(n)
    spike = np.zeros(n)
    spike[250] = 5.0
    normed = pd.DataFrame({"ent": quiet, "dep": quiet, "spr": spike, "ofi": quiet})
    cfg = TriggerConfig(percentile=85, suppression=10, burn_in=200, variant=TriggerVariant.MULTI)

    events = fire_triggers(_trace(np.zeros(n), normed), cfg)

    assert [e.tau for e in events] == [250]
    assert events[0].first_channel == "spr"


def test_flat_scores_never_fire():
    cfg = TriggerConfig(percentile=85, suppression=10, burn_in=50)
    assert fire_triggers(_trace(np.full(200, 0.4)), cfg) == []


def test_rescore_changes_composite_only():
    normed = pd.DataFrame({"ent": [0.1, 0.9], "dep": [0.5, 0.2], "spr": [0.0, 0.0], "ofi": [0.3, 0.1]})
    trace = _trace(np.array([0.5, 0.9]), normed)

    no_ent = rescore(trace, replace(TriggerConfig(), channels=("dep", "spr", "ofi")))
    assert np.allclose(no_ent.composite, [0.5, 0.2])
    assert list(no_ent.first_channel) == ["dep", "dep"]
    assert no_ent.normed is trace.normed


def test_run_detector_needs_burn_in():
    model = HmmModel(
        trans=np.full((3, 3), 1 / 3),
        means=np.zeros((3, 4)),
        covs=np.stack([np.eye(4)] * 3),
        init=np.full(3, 1 / 3),
    )
    with pytest.raises(ParameterError):
        run_detector(np.zeros((100, 4)), model, SignalConfig(), TriggerConfig(burn_in=500))


def test_config_validation():
    with pytest.raises(ParameterError):
        TriggerConfig(percentile=20).validate()
    with pytest.raises(ParameterError):
        TriggerConfig(burn_in=50).validate(SignalConfig(baseline_window=100))
    with pytest.raises(ParameterError):
        TriggerConfig(channels=("ent", "bogus")).validate()


# --- End to end on simulated streams ------------------------------------------


S, B, X = RegimeLabel.STABLE, RegimeLabel.BUILDUP, RegimeLabel.STRESS


@pytest.fixture(scope="module")
def params():
    return dgp_params_from_config(load_config("src/config/default.yaml"))


@pytest.fixture(scope="module")
def sharp(params):
    """Fast drift through low noise."""
    return replace(params, alpha=0.3, sigma=0.01 * np.eye(params.d), p01=1e-3, p12=0.01)


def oracle_model(params):
    return HmmModel(
        trans=params.transition_matrix(),
        means=regime_reference_means(params),
        covs=np.stack([params.sigma] * 3),
        init=np.array([1.0, 0.0, 0.0]),
    )


def _labels(*segments):
    return np.concatenate([np.full(n, label, dtype=int) for label, n in segments])


def test_all_stable_runs_stay_quiet(params):
    quiet = replace(params, p01=1e-9)
    model = oracle_model(params)
    counts = []
    for seed in range(10):
        run = simulate_run(quiet, seed)
        assert (run.labels == S).all()
        counts.append(len(run_detector(run.frames, model, SignalConfig(), TriggerConfig())))

    assert np.mean(counts) <= 0.2, counts


def test_high_snr_buildup_fires_once(sharp):
    labels = _labels((S, 1200), (B, 40), (X, 50), (S, 710))
    model = oracle_model(sharp)
    for seed in range(5):
        frames = emit_observations(labels, sharp, seed)
        taus = [e.tau for e in run_detector(frames, model, SignalConfig(), TriggerConfig())]
        assert len(taus) == 1, (seed, taus)
        assert 1200 <= taus[0] < 1240


def test_coverage_rises_with_buildup_length(sharp):
    segments = [(S, 600)]
    for t1 in (2, 60, 2, 60, 2, 60):
        segments += [(B, t1), (X, 20), (S, 150)]
    labels = _labels(*segments)
    frames = emit_observations(labels, sharp, 11)

    events = [StressEvent.from_episode(e) for e in extract_episodes(labels)]
    triggers = run_detector(frames, oracle_model(sharp), SignalConfig(), TriggerConfig())
    matches = match_triggers(triggers, events)
    snr = [cumulative_snr(episode_snr(frames, e.episode, sharp.v), e.episode.t1_obs) for e in events]

    table = conditional_breakdown(matches, snr).set_index(["snr_bin", "t1_bin"])
    assert table.loc[("high", "long"), "n"] == 3
    assert table.loc[("high", "long"), "coverage"] == 1.0
    assert table.loc[("low", "short"), "n"] == 3
    assert table.loc[("low", "short"), "coverage"] < 1.0


# --- Aggregation and rising-edge ablations -------------------------------------


def _referenced_trace(normed, reference, how="max"):
    values = normed.to_numpy(dtype=float)
    composite = values.max(axis=1) if how == "max" else values.sum(axis=1)
    return DetectorTrace(
        posteriors=None,
        raw=normed,
        normed=normed,
        composite=composite,
        first_channel=np.array(normed.columns, dtype=object)[values.argmax(axis=1)],
        normalizer=ChannelNormalizer(means={}, stds={}, squash_max=3.0),
        reference=reference,
    )


def test_max_catches_single_channel_drift_sum_dilutes():
    n = 600
    rng = np.random.default_rng(2)
    noise = 3.0 * np.tanh(np.abs(rng.normal(0, 1, (n, 4))) / 3.0)
    ramp = np.zeros(n)
    ramp[400:450] = 3.0 * np.tanh(np.linspace(0, 10, 50) / 3.0)
    normed = pd.DataFrame(noise, columns=["ent", "dep", "spr", "ofi"])
    normed.loc[400:449, "dep"] = ramp[400:450]

    reference = np.zeros(n, dtype=bool)
    reference[100:300] = True
    max_cfg = TriggerConfig(burn_in=300, suppression=10)
    sum_cfg = replace(max_cfg, aggregation="sum")

    max_taus = [e.tau for e in fire_triggers(_referenced_trace(normed, reference), max_cfg)]
    sum_taus = [e.tau for e in fire_triggers(_referenced_trace(normed, reference, "sum"), sum_cfg)]

    assert [t for t in max_taus if 400 <= t < 450], max_taus
    assert not [t for t in sum_taus if 400 <= t < 450], sum_taus


def test_plateau_refires_without_rising_edge():
    s = np.r_[np.zeros(400), np.full(200, 5.0)]
    events = [StressEvent(onset=405, end=599)]
    cfg = TriggerConfig(burn_in=200, suppression=10)

    def precision(trig_cfg):
        triggers = fire_triggers(_trace(s), trig_cfg)
        matched = sum(m.matched for m in match_triggers(triggers, events, mode="replay"))
        return matched / len(triggers)

    assert [e.tau for e in fire_triggers(_trace(s), cfg)] == [400]
    assert precision(cfg) == 1.0
    assert precision(replace(cfg, rising_edge=False)) < 0.5
