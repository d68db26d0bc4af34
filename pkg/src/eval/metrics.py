"""
Lead-time aware evaluation.

Triggers are matched to stress events (closest prior trigger inside the
event's window), then summarised as mean lead time, precision and coverage,
with confidence intervals across runs.
"""

import bisect
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import linregress

from src.data.dgp import Episode
from src.errors import InputError

logger = logging.getLogger(__name__)

T1_BIN_NAMES = ("short", "medium", "long")
SNR_BIN_NAMES = ("low", "medium", "high")


@dataclass(frozen=True)
class StressEvent:
    """A stress onset with its end; episode is set for simulated runs."""

    onset: int
    end: int
    episode: Episode | None = None
    label_id: int | None = None

    def __post_init__(self):
        if self.onset > self.end:
            raise InputError(f"stress event onset {self.onset} after end {self.end}")

    @classmethod
    def from_episode(cls, episode: Episode, label_id: int | None = None):
        return cls(episode.stress_onset, episode.stress_end, episode, label_id)


@dataclass(frozen=True)
class MatchResult:
    stress: StressEvent
    matched_trigger: object = None
    lead_time: int | None = None

    @property
    def matched(self) -> bool:
        return self.matched_trigger is not None


@dataclass(frozen=True)
class RunOutcome:
    """Counts and lead times for one stream."""

    n_triggers: int
    n_events: int
    n_matched: int
    lead_times: tuple
    first_channels: tuple = ()

    @property
    def precision(self):
        return self.n_matched / self.n_triggers if self.n_triggers else None

    @property
    def coverage(self):
        return self.n_matched / self.n_events if self.n_events else None

    @property
    def mean_lead(self):
        return float(np.mean(self.lead_times)) if self.lead_times else None


@dataclass
class EvalReport:
    detector: str
    mean_lead: float | None
    lead_ci: float | None
    precision: float | None
    precision_ci: float | None
    coverage: float | None
    coverage_ci: float | None
    n_triggers: int
    n_events: int
    n_matched: int
    n_runs: int
    per_cell: pd.DataFrame | None = field(default=None, repr=False)
    per_channel_first: dict = field(default_factory=dict)

    TABLE_COLUMNS = (
        "detector",
        "mean_lead",
        "lead_ci",
        "precision",
        "precision_ci",
        "coverage",
        "coverage_ci",
        "n_triggers",
        "n_events",
        "n_matched",
        "n_runs",
    )

    def as_row(self) -> dict:
        return {c: getattr(self, c) for c in self.TABLE_COLUMNS}


def _tau(trigger) -> int:
    return int(getattr(trigger, "tau", trigger))


def _window_start(event, mode: str, match_window: int) -> int:
    if mode == "simulation":
        if event.episode is None:
            raise InputError("simulation matching needs the event's build-up episode")
        return event.episode.buildup_start
    if mode == "replay":
        return event.onset - match_window
    raise InputError(f"unknown match mode '{mode}'")


def _check_events(events):
    for prev, cur in zip(events, events[1:]):
        if cur.onset < prev.onset:
            raise InputError("stress events must be sorted by onset")
        if cur.onset <= prev.end:
            raise InputError(
                f"overlapping stress events at {prev.onset}-{prev.end} and {cur.onset}"
            )


def match_triggers(triggers, events, mode: str = "simulation", match_window: int = 300):
    """
    Pair each stress event with at most one trigger.

    Simulation window: [buildup_start, onset). Replay window:
    [onset - match_window, onset). Within the window the latest unused
    trigger wins; a trigger is used at most once. Triggers may be
    TriggerEvent objects or plain step indices.
    """
    events = list(events)
    _check_events(events)
    taus = [_tau(trig) for trig in triggers]
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise InputError("triggers must be sorted by time")

    used = set()
    results = []
    for event in events:
        lo = _window_start(event, mode, match_window)

        chosen = None
        for i in range(len(taus) - 1, -1, -1):
            if taus[i] >= event.onset:
                continue
            if taus[i] < lo:
                break
            if i not in used:
                chosen = i
                break

        if chosen is None:
            results.append(MatchResult(event))
        else:
            used.add(chosen)
            results.append(MatchResult(event, triggers[chosen], event.onset - taus[chosen]))

    return results


def response_times(triggers, events, mode: str = "simulation", match_window: int = 300) -> list[int]:
    """
    Signed onset - tau of the first trigger between each event's window
    start and its end. Negative values are late (in-stress) alarms. Events
    with no trigger in that span are skipped.
    """
    taus = sorted(_tau(trig) for trig in triggers)
    out = []
    for event in events:
        lo = _window_start(event, mode, match_window)
        k = bisect.bisect_left(taus, lo)
        if k < len(taus) and taus[k] <= event.end:
            out.append(event.onset - taus[k])
    return out


def run_outcome(matches, triggers, events) -> RunOutcome:
    matched = [m for m in matches if m.matched]
    return RunOutcome(
        n_triggers=len(triggers),
        n_events=len(events),
        n_matched=len(matched),
        lead_times=tuple(m.lead_time for m in matched),
        first_channels=tuple(
            getattr(m.matched_trigger, "first_channel", None)
            for m in matched
            if getattr(m.matched_trigger, "first_channel", None) is not None
        ),
    )


def _ci(values) -> float | None:
    values = [v for v in values if v is not None]
    if len(values) < 2:
        return None
    return float(1.96 * np.std(values, ddof=1) / math.sqrt(len(values)))


def pool_outcomes(outcomes, detector: str = "trigger") -> EvalReport:
    """
    Pooled point estimates with 1.96 * SE intervals across runs.

    With a single run the lead-time interval is taken over its individual
    lead times and the ratio intervals are undefined.
    """
    outcomes = list(outcomes)
    n_trig = sum(o.n_triggers for o in outcomes)
    n_events = sum(o.n_events for o in outcomes)
    n_matched = sum(o.n_matched for o in outcomes)
    leads = [lt for o in outcomes for lt in o.lead_times]

    if len(outcomes) >= 2:
        lead_ci = _ci([o.mean_lead for o in outcomes])
    else:
        lead_ci = _ci(leads)

    channels = Counter(c for o in outcomes for c in o.first_channels)
    total = sum(channels.values())

    return EvalReport(
        detector=detector,
        mean_lead=float(np.mean(leads)) if leads else None,
        lead_ci=lead_ci,
        precision=n_matched / n_trig if n_trig else None,
        precision_ci=_ci([o.precision for o in outcomes]),
        coverage=n_matched / n_events if n_events else None,
        coverage_ci=_ci([o.coverage for o in outcomes]),
        n_triggers=n_trig,
        n_events=n_events,
        n_matched=n_matched,
        n_runs=len(outcomes),
        per_channel_first={c: channels[c] / total for c in sorted(channels)} if total else {},
    )


def compute_report(matches, triggers, events, detector: str = "trigger") -> EvalReport:
    """Report for a single stream."""
    return pool_outcomes([run_outcome(matches, triggers, events)], detector)


def episode_snr(frames, episode: Episode, v) -> float:
    """
    Per-episode drift-to-noise estimate.

    Math:
        Regress `y_s = v' X_{buildup_start + s}` on s over the build-up and
        return slope / residual std. Fewer than 3 build-up steps gives 0.
    """
    X = np.asarray(frames, dtype=float)[episode.buildup_start : episode.stress_onset]
    n = len(X)
    if n < 3:
        return 0.0

    y = X @ np.asarray(v, dtype=float)
    s = np.arange(n, dtype=float)
    fit = linregress(s, y)
    residuals = y - (fit.intercept + fit.slope * s)
    resid_std = math.sqrt(float(np.sum(residuals**2)) / (n - 2))
    if resid_std <= 1e-12:
        return 0.0
    return float(fit.slope / resid_std)


def cumulative_snr(eta_hat: float, t1_obs: int) -> float:
    """
    Drift-to-noise accumulated over the observed build-up, the scale the
    SNR bins are cut on.

    Math:
        `eta_hat * sqrt(t1_obs)`; non-positive durations give 0.
    """
    if t1_obs <= 0:
        return 0.0
    return float(eta_hat) * math.sqrt(t1_obs)


def _bin(value, edges, inclusive_upper: bool):
    lo, hi = edges
    if value < lo:
        return 0
    if value < hi or (inclusive_upper and value == hi):
        return 1
    return 2


def t1_bin(t1: float, edges=(10, 25)) -> str:
    """short < 10 <= medium <= 25 < long"""
    return T1_BIN_NAMES[_bin(t1, edges, inclusive_upper=True)]


def snr_bin(snr: float, edges=(0.15, 0.30)) -> str:
    """low < 0.15 <= medium <= 0.30 < high"""
    return SNR_BIN_NAMES[_bin(snr, edges, inclusive_upper=True)]


def conditional_breakdown(matches, snr_estimates, t1_bins=(10, 25), snr_bins=(0.15, 0.30)) -> pd.DataFrame:
    """
    Coverage per (SNR bin, build-up duration bin), long form.

    One row per cell in fixed order; empty cells carry coverage=None.
    """
    if len(matches) != len(snr_estimates):
        raise InputError("need one SNR estimate per match")

    hits = {(s, t): [] for s in SNR_BIN_NAMES for t in T1_BIN_NAMES}
    for match, snr in zip(matches, snr_estimates):
        episode = match.stress.episode
        if episode is None:
            raise InputError("conditional breakdown needs simulated episodes")
        key = (snr_bin(snr, snr_bins), t1_bin(episode.t1_obs, t1_bins))
        hits[key].append(1.0 if match.matched else 0.0)

    rows = []
    for (s, t), values in hits.items():
        n = len(values)
        if n == 0:
            logger.warning("empty conditional cell snr=%s t1=%s", s, t)
            rows.append({"snr_bin": s, "t1_bin": t, "coverage": None, "se": None, "n": 0})
            continue
        cov = float(np.mean(values))
        rows.append(
            {
                "snr_bin": s,
                "t1_bin": t,
                "coverage": cov,
                "se": math.sqrt(cov * (1.0 - cov) / n),
                "n": n,
            }
        )
    return pd.DataFrame(rows, columns=["snr_bin", "t1_bin", "coverage", "se", "n"])
