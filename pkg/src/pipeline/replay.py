"""
Replay of recorded snapshot files through the full detection pipeline.

For each test day: bin the snapshots, deseasonalise against the preceding
days, z-score causally, refit the HMM on the trailing training window, then
stream the trigger (threshold refreshed on a fixed cadence) and the
comparison detectors, and match everything against spread-based stress
labels inside a fixed pre-onset window.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from src.data.snapshots import read_snapshots_csv
from src.detect.baselines import (
    BaselineConfig,
    NigPrior,
    bocpd_detect,
    calibrate_cusum_h,
    cusum_detect,
    hmm_posterior_detect,
    imbalance_detect,
    percentile_threshold,
    volatility_detect,
)
from src.detect.trigger import TriggerConfig, TriggerVariant, fire_triggers, score_trace
from src.errors import ParameterError
from src.eval.metrics import EvalReport, StressEvent, match_triggers, pool_outcomes, run_outcome
from src.features.channels import SignalConfig
from src.features.lob import (
    FEATURE_COLUMNS,
    StressLabel,
    bin_snapshots,
    causal_zscore,
    deseasonalize,
    label_stress,
    spread_blowout,
)
from src.models.hmm import HmmModel, fit_hmm, load_model, save_model
from src.utils.io import config_hash

logger = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600


@dataclass(frozen=True)
class ReplayConfig:
    data_dir: str = "data/replay"
    train_days: int = 1
    test_days: int = 1
    train_hours: float = 24.0
    w: int = 60
    baseline_window: int = 600
    suppression: int = 120
    percentile: float = 85.0
    threshold_update_seconds: int = 1800
    match_window: int = 300
    zscore_window: int = 1800
    exclude_open_minutes: int = 60
    vol_window: int = 60
    smooth_seconds: int = 5
    max_ffill: int = 3
    stress_multiplier: float = 3.0
    stress_median_window: int = 600
    stress_min_duration: int = 30
    n_restarts: int = 10
    max_iters: int = 100
    seed: int = 0
    variant: str = "adaptive"

    def validate(self):
        if self.train_days < 1 or self.test_days < 1:
            raise ParameterError("need at least one training and one test day")
        if self.train_hours <= 0:
            raise ParameterError("train_hours must be > 0")
        self.signal_config().validate()
        if self.match_window <= 0:
            raise ParameterError("match_window must be > 0")

    def signal_config(self) -> SignalConfig:
        return SignalConfig(w=self.w, baseline_window=self.baseline_window)

    def trigger_config(self, burn_in: int) -> TriggerConfig:
        return TriggerConfig(
            percentile=self.percentile,
            suppression=self.suppression,
            variant=TriggerVariant(self.variant),
            burn_in=burn_in,
            threshold_update_interval=self.threshold_update_seconds,
            history_cap=int(self.train_hours * SECONDS_PER_HOUR),
        )


@dataclass
class DayResult:
    """One test day: triggers, labels and per-detector alarms (day-local bins)."""

    date: pd.Timestamp
    triggers: list
    labels: list
    alarms: dict
    matches: list
    n_bins: int


@dataclass
class ReplayResult:
    report: EvalReport
    baselines: list = field(default_factory=list)
    days: list = field(default_factory=list)

    @property
    def triggers(self):
        return [trig for day in self.days for trig in day.triggers]

    @property
    def labels(self):
        return [label for day in self.days for label in day.labels]


def load_days(data_dir, cfg: ReplayConfig) -> list[pd.DataFrame]:
    """Bin every daily file in data_dir, oldest first."""
    paths = sorted(Path(data_dir).glob("snapshots_*.csv"))
    if len(paths) < cfg.train_days + 1:
        raise ParameterError(
            f"need at least {cfg.train_days + 1} daily files in {data_dir}, found {len(paths)}"
        )

    days = []
    for path in paths[: cfg.train_days + cfg.test_days]:
        binned = bin_snapshots(
            read_snapshots_csv(path),
            vol_window=cfg.vol_window,
            smooth_seconds=cfg.smooth_seconds,
            max_ffill=cfg.max_ffill,
        )
        if len(binned) == 0:
            raise ParameterError(f"{path} holds no usable snapshots")
        days.append(binned)
        logger.info("binned %s: %d seconds", path.name, len(binned))
    return days


def _evaluation_events(labels, start_bin):
    return [
        StressEvent(onset=lab.onset, end=lab.onset + lab.duration - 1, label_id=i)
        for i, lab in enumerate(labels)
        if lab.onset >= start_bin
    ]


def daily_model(history: pd.DataFrame, train_frames, cfg: ReplayConfig, model_dir=None) -> HmmModel:
    """
    HMM for one test day, fitted on the training span's finite frames.

    With model_dir set the fit is stored as hmm_<last training date>_<hash>.yaml,
    the hash covering the replay settings and the training span, and reused
    when that file already exists.
    """
    if model_dir is None:
        return fit_hmm(train_frames, n_restarts=cfg.n_restarts, max_iters=cfg.max_iters, seed=cfg.seed)

    stamps = pd.DatetimeIndex(history["timestamp"])
    settings = {k: v for k, v in asdict(cfg).items() if k != "data_dir"}
    key = config_hash(
        {
            "replay": settings,
            "train_start": stamps[0].isoformat(),
            "train_stop": stamps[-1].isoformat(),
            "n_train": len(train_frames),
        }
    )
    path = Path(model_dir) / f"hmm_{stamps[-1]:%Y%m%d}_{key[:12]}.yaml"
    if path.exists():
        logger.info("reusing fitted model %s", path.name)
        return load_model(path)

    model = fit_hmm(train_frames, n_restarts=cfg.n_restarts, max_iters=cfg.max_iters, seed=cfg.seed)
    save_model(model, path)
    logger.info("saved fitted model %s", path.name)
    return model


def replay_day(
    history: pd.DataFrame,
    day: pd.DataFrame,
    cfg: ReplayConfig,
    base_cfg: BaselineConfig,
    model_dir=None,
) -> DayResult:
    """
    Run every detector over one test day.

    `history` holds the binned training span that precedes the day. All
    fitted state (seasonal medians, HMM, normaliser, thresholds) comes from
    it. The HMM state with the largest long-run occupancy is taken as the
    stable one, and the trigger stays silent while the spread blow-out rule
    already sees stress.
    """
    n_hist = len(history)
    if n_hist == 0:
        raise ParameterError("empty training span before test day")

    span = pd.concat([history, day], ignore_index=True)
    training_days = sorted(set(pd.DatetimeIndex(history["timestamp"]).normalize()))

    adjusted, _ = deseasonalize(span, training_days, keep_level=True)
    z = causal_zscore(adjusted, FEATURE_COLUMNS, window=cfg.zscore_window)
    frames = z[list(FEATURE_COLUMNS)].to_numpy(dtype=float)

    train_frames = frames[:n_hist]
    train_frames = train_frames[np.all(np.isfinite(train_frames), axis=1)]
    model = daily_model(history, train_frames, cfg, model_dir)
    stable = int(np.argmax(model.occupancy()))

    inputs = pd.DataFrame(
        {
            "spread": adjusted["spread"].to_numpy(),
            "depth": adjusted["depth"].to_numpy(),
            "imbalance": adjusted["imbalance"].clip(-1.0, 1.0).to_numpy(),
        }
    )
    blowout = spread_blowout(span, cfg.stress_multiplier, cfg.stress_median_window)

    sig_cfg = cfg.signal_config()
    trig_cfg = cfg.trigger_config(burn_in=n_hist)
    trace = score_trace(
        frames,
        model,
        sig_cfg,
        trig_cfg,
        inputs=inputs,
        fit_stop=n_hist,
        stable_state=stable,
        stress_rows=blowout,
    )
    events = fire_triggers(trace, trig_cfg, start=n_hist)

    # From here on, indices are seconds since the day's first bin
    open_bins = cfg.exclude_open_minutes * 60
    triggers = [
        replace(e, tau=e.tau - n_hist) for e in events if e.tau - n_hist >= open_bins
    ]

    span_labels = label_stress(
        span,
        multiplier=cfg.stress_multiplier,
        median_window=cfg.stress_median_window,
        min_duration=cfg.stress_min_duration,
    )
    labels = [
        StressLabel(lab.onset - n_hist, lab.duration) for lab in span_labels if lab.onset >= n_hist
    ]
    stress_events = _evaluation_events(labels, open_bins)

    matches = match_triggers(triggers, stress_events, mode="replay", match_window=cfg.match_window)

    alarms = _baseline_alarms(span, frames, trace, model, stable, n_hist, cfg, base_cfg)
    alarms = {
        name: [t - n_hist for t in ts if t - n_hist >= open_bins] for name, ts in alarms.items()
    }

    return DayResult(
        date=pd.Timestamp(day["timestamp"].iloc[0]).normalize(),
        triggers=triggers,
        labels=labels,
        alarms=alarms,
        matches=matches,
        n_bins=len(day),
    )


def _baseline_alarms(
    span, frames, trace, model, stable: int, n_hist, cfg: ReplayConfig, base_cfg: BaselineConfig
) -> dict:
    """
    Comparison detectors calibrated at the same percentile on the training
    span's in-control rows (the trigger's reference rows).
    """
    p = base_cfg.percentile
    L = cfg.suppression
    alarms = {}

    ref = np.zeros(n_hist, dtype=bool) if trace.reference is None else trace.reference[:n_hist].copy()
    if ref.sum() < 2:
        logger.warning("only %d in-control training bins; calibrating baselines on all of them", ref.sum())
        ref = np.all(np.isfinite(frames[:n_hist]), axis=1)

    def calibrate(values, **bounds):
        return percentile_threshold(
            values[:n_hist][ref],
            p,
            reference_percentile=base_cfg.reference_percentile,
            margin=base_cfg.floor_margin,
            **bounds,
        )

    imbalance = span["imbalance"].clip(-1.0, 1.0).to_numpy(dtype=float)
    alarms["imbalance"] = imbalance_detect(imbalance, calibrate(np.abs(imbalance), lower=1e-6), L, n_hist)

    vol = span["vol"].to_numpy(dtype=float)
    alarms["volatility"] = volatility_detect(vol, calibrate(vol, lower=1e-12), L, n_hist)

    pi = trace.posteriors.pi
    theta_hmm = calibrate(1.0 - pi[:, stable], lower=1e-6, upper=1 - 1e-6)
    alarms["hmm_posterior"] = hmm_posterior_detect(pi, theta_hmm, stable, L, n_hist)

    spread_z = frames[:, 0]
    stressed = int(np.argmax(model.means[:, 0]))
    mu0 = float(model.means[stable, 0])
    k_ref = max(abs(float(model.means[stressed, 0]) - mu0) / 2.0, 1e-6)
    burn = spread_z[:n_hist]
    h = calibrate_cusum_h(burn, mu0, k_ref, p, in_control=ref)
    alarms["cusum"] = cusum_detect(spread_z, mu0, k_ref, h, L, n_hist)

    prior = NigPrior.from_burn_in(burn[ref])
    alarms["bocpd"] = bocpd_detect(
        spread_z,
        base_cfg.bocpd_hazard,
        base_cfg.bocpd_alarm,
        prior=prior,
        suppression=L,
        start=n_hist,
        max_run=base_cfg.bocpd_max_run,
    )
    return alarms


def replay_detect(
    data_dir, cfg: ReplayConfig, base_cfg: BaselineConfig | None = None, model_dir=None
) -> ReplayResult:
    """
    Replay the trigger and the comparison detectors over recorded days.

    The first cfg.train_days files seed training; each following file (up to
    cfg.test_days) is a test day whose model is refitted on the trailing
    cfg.train_hours of earlier bins, or reloaded from model_dir.
    """
    cfg.validate()
    base_cfg = base_cfg or BaselineConfig()
    days = load_days(data_dir, cfg)

    train_span = pd.Timedelta(hours=cfg.train_hours)
    results = []
    for i in range(cfg.train_days, len(days)):
        day = days[i]
        day_start = pd.Timestamp(day["timestamp"].iloc[0])
        earlier = pd.concat(days[:i], ignore_index=True)
        stamps = pd.DatetimeIndex(earlier["timestamp"])
        history = earlier.loc[stamps >= day_start - train_span].reset_index(drop=True)
        if len(history) == 0:
            raise ParameterError(f"no training data within {cfg.train_hours} h of {day_start}")

        result = replay_day(history, day, cfg, base_cfg, model_dir)
        logger.info(
            "replayed %s: %d triggers, %d stress labels",
            result.date.date(),
            len(result.triggers),
            len(result.labels),
        )
        results.append(result)

    if not results:
        raise ParameterError("evaluation span shorter than one refit period")

    report = pool_outcomes(
        [run_outcome(d.matches, d.triggers, [m.stress for m in d.matches]) for d in results],
        detector="trigger",
    )

    baselines = []
    for name in ("hmm_posterior", "cusum", "bocpd", "imbalance", "volatility"):
        outcomes = []
        for d in results:
            events = [m.stress for m in d.matches]
            matches = match_triggers(d.alarms[name], events, mode="replay", match_window=cfg.match_window)
            outcomes.append(run_outcome(matches, d.alarms[name], events))
        baselines.append(pool_outcomes(outcomes, detector=name))

    return ReplayResult(report=report, baselines=baselines, days=results)


def replay_tables(result: ReplayResult) -> tuple[pd.DataFrame, pd.DataFrame]:
    """(detector comparison table, per-event table) for a replay run."""
    summary = pd.DataFrame([r.as_row() for r in [result.report, *result.baselines]])

    rows = []
    for day in result.days:
        for m in day.matches:
            rows.append(
                {
                    "date": day.date.date().isoformat(),
                    "onset": m.stress.onset,
                    "duration": m.stress.end - m.stress.onset + 1,
                    "trigger": getattr(m.matched_trigger, "tau", None),
                    "lead_time": m.lead_time,
                    "first_channel": getattr(m.matched_trigger, "first_channel", None),
                }
            )
    columns = ["date", "onset", "duration", "trigger", "lead_time", "first_channel"]
    return summary, pd.DataFrame(rows, columns=columns)
