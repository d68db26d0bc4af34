"""
Rising-edge trigger detector.

The detector filters each frame through the HMM, scores the four channels,
normalises and aggregates them, and fires when the composite crosses an
adaptive percentile threshold on a rising edge, at most once per
suppression window.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import pandas as pd
from sortedcontainers import SortedList

from src.data.dgp import RegimeLabel
from src.errors import ParameterError
from src.features.channels import (
    CHANNELS,
    ChannelNormalizer,
    SignalConfig,
    aggregate,
    channel_series,
    frame_inputs,
)
from src.models.hmm import HmmModel, PosteriorPath, filter_sequence

logger = logging.getLogger(__name__)


class TriggerVariant(str, Enum):
    STANDARD = "standard"
    ADAPTIVE = "adaptive"
    MULTI = "multi"


@dataclass(frozen=True)
class TriggerConfig:
    """Detector settings plus the switches the ablation arms flip."""

    percentile: float = 85.0
    suppression: int = 50
    variant: TriggerVariant = TriggerVariant.ADAPTIVE
    burn_in: int = 500
    threshold_update_interval: int = 1
    history_cap: int = 100_000
    rising_edge: bool = True
    aggregation: str = "max"
    channels: tuple = CHANNELS
    # In-control floor under the threshold: reference percentile plus a
    # margin in reference standard deviations
    reference_percentile: float = 99.0
    floor_margin: float = 2.5
    stress_gate: bool = True

    def validate(self, signal: SignalConfig | None = None):
        if not 50.0 <= self.percentile <= 99.9:
            raise ParameterError(f"percentile must be in [50, 99.9], got {self.percentile}")
        if not 50.0 <= self.reference_percentile <= 100.0:
            raise ParameterError("reference_percentile must be in [50, 100]")
        if self.floor_margin < 0:
            raise ParameterError("floor_margin must be >= 0")
        if self.suppression < 1:
            raise ParameterError("suppression must be >= 1")
        if self.threshold_update_interval < 1 or self.history_cap < 1:
            raise ParameterError("threshold_update_interval and history_cap must be >= 1")
        if signal is not None and self.burn_in < signal.baseline_window:
            raise ParameterError("burn_in must be >= the signal baseline_window")
        if self.aggregation not in ("max", "sum"):
            raise ParameterError(f"unknown aggregation '{self.aggregation}'")
        unknown = set(self.channels) - set(CHANNELS)
        if unknown or not self.channels:
            raise ParameterError(f"invalid channel selection {self.channels}")


@dataclass(frozen=True)
class TriggerEvent:
    tau: int
    score: float
    threshold: float
    prev_score: float
    first_channel: str
    variant: str

    def as_record(self) -> dict:
        return {
            "tau": self.tau,
            "score": self.score,
            "threshold": self.threshold,
            "prev_score": self.prev_score,
            "first_channel": self.first_channel,
            "variant": self.variant,
        }


class EmpiricalQuantile:
    """
    Exact empirical quantile over the most recent `cap` values.

    Keeps a sorted copy alongside arrival order so the oldest value can be
    evicted once the cap is reached.
    """

    def __init__(self, percentile: float, cap: int = 100_000):
        self.percentile = percentile
        self.cap = cap
        self._sorted = SortedList()
        self._arrivals = deque()

    def __len__(self):
        return len(self._sorted)

    def add(self, value: float):
        if len(self._arrivals) == self.cap:
            old = self._arrivals.popleft()
            self._sorted.remove(old)
        self._arrivals.append(value)
        self._sorted.add(value)

    def extend(self, values):
        for v in values:
            self.add(float(v))

    def value(self) -> float:
        """Smallest stored value whose empirical CDF is >= percentile/100."""
        n = len(self._sorted)
        if n == 0:
            return math.inf
        k = max(1, math.ceil(self.percentile * n / 100.0 - 1e-9))
        return self._sorted[k - 1]


def adaptive_threshold(score_history, p: float) -> float:
    """p-th empirical percentile of the history; +inf when empty."""
    q = EmpiricalQuantile(p, cap=max(1, len(score_history)))
    q.extend(score_history)
    return q.value()


def rising_edge_fire(s_t, s_prev, theta, t, t_last, L, rising_edge: bool = True) -> bool:
    """
    Fire iff s_t > theta, s_t > s_prev, and t - t_last > L.

    t_last=None means no earlier trigger. rising_edge=False drops the slope
    condition (ablation only).
    """
    if not s_t > theta:
        return False
    if rising_edge and not s_t - s_prev > 0:
        return False
    return t_last is None or t - t_last > L


@dataclass(frozen=True)
class DetectorTrace:
    """
    Everything the detector computes per step, before firing.

    reference marks the in-control burn-in rows the normaliser and the
    threshold floor are calibrated on; armed marks the rows where firing is
    allowed. Either may be None (no floor, no gate).
    """

    posteriors: PosteriorPath
    raw: pd.DataFrame
    normed: pd.DataFrame
    composite: np.ndarray
    first_channel: np.ndarray
    normalizer: ChannelNormalizer = field(repr=False)
    reference: np.ndarray | None = field(default=None, repr=False)
    armed: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.composite)

    def channel_records(self, start: int = 0):
        """Per-step channel scores as dicts, for the JSONL trace."""
        for t in range(start, len(self)):
            row = {"t": t}
            row.update({c: float(self.normed.at[t, c]) for c in self.normed.columns})
            row["composite"] = float(self.composite[t])
            row["first_channel"] = str(self.first_channel[t])
            yield row


def _top_state(pi) -> np.ndarray:
    """Argmax state per row, -1 where the posterior is missing."""
    pi = np.asarray(pi, dtype=float)
    valid = np.all(np.isfinite(pi), axis=1)
    top = np.argmax(np.where(valid[:, None], pi, -1.0), axis=1)
    return np.where(valid, top, -1)


def stable_reference(pi, stable_state: int, start: int, stop: int) -> np.ndarray:
    """Rows in [start, stop) whose filtered posterior puts stable_state first."""
    top = _top_state(pi)
    rows = np.zeros(len(top), dtype=bool)
    rows[start:stop] = top[start:stop] == stable_state
    return rows


def armed_rows(stress_rows, hold: int) -> np.ndarray:
    """False wherever stress was visible at that row or any of the `hold` before it."""
    stress = pd.Series(np.asarray(stress_rows, dtype=float))
    recent = stress.rolling(hold + 1, min_periods=1).max().to_numpy()
    return recent < 0.5


def reference_floor(scores, percentile: float, margin: float, squash_max: float, cap: float | None = None) -> float:
    """
    In-control floor for a squashed score.

    The reference percentile is taken back through the squash, raised by
    `margin` z units and squashed again. cap is the score's ceiling:
    squash_max for one channel or the MAX composite, n * squash_max for a
    SUM over n channels. An empty reference gives -inf.

    Math:
        `z_q = m * artanh(q / cap)`, `floor = cap * tanh((z_q + margin) / m)`
    """
    scores = np.asarray(scores, dtype=float)
    scores = scores[np.isfinite(scores)]
    if len(scores) == 0:
        return -math.inf
    cap = squash_max if cap is None else cap
    q = adaptive_threshold(scores.tolist(), percentile)
    u = min(max(q / cap, 0.0), 1.0 - 1e-12)
    z = squash_max * math.atanh(u)
    return float(cap * math.tanh((z + margin) / squash_max))


def score_trace(
    frames,
    model: HmmModel,
    sig_cfg: SignalConfig,
    trig_cfg: TriggerConfig,
    inputs: pd.DataFrame | None = None,
    fit_stop: int | None = None,
    reset_mask=None,
    stable_state: int = RegimeLabel.STABLE,
    stress_rows=None,
) -> DetectorTrace:
    """
    Filter, score and aggregate a whole stream.

    `frames` feed the HMM; `inputs` (spread, depth, imbalance columns) feed
    the depth, spread and flow channels and default to the frames
    themselves. The normaliser is fitted on the reference rows: burn-in rows
    before fit_stop (default burn_in), past the channel warm-up, whose
    posterior puts stable_state first. stress_rows flags rows where stress
    is already visible; by default those are rows whose posterior puts the
    stress regime first.
    """
    frames = np.asarray(frames, dtype=float)
    if inputs is None:
        inputs = frame_inputs(frames)
    fit_stop = trig_cfg.burn_in if fit_stop is None else fit_stop

    posteriors = filter_sequence(model, frames, reset_mask=reset_mask)
    raw = channel_series(
        inputs["spread"], inputs["depth"], inputs["imbalance"], posteriors.entropy, sig_cfg
    )

    warmup = min(sig_cfg.baseline_window, fit_stop)
    reference = stable_reference(posteriors.pi, stable_state, warmup, fit_stop)
    if reference.sum() < sig_cfg.w:
        logger.warning(
            "only %d in-control burn-in rows, calibrating on the whole burn-in", int(reference.sum())
        )
        reference[:] = False
        reference[warmup if warmup < fit_stop else 0 : fit_stop] = True

    normalizer = ChannelNormalizer.fit(raw[reference], sig_cfg)
    normed = normalizer.transform(raw)
    composite, first = aggregate(normed, trig_cfg.channels, trig_cfg.aggregation)

    armed = None
    if trig_cfg.stress_gate:
        if stress_rows is None:
            stress_rows = _top_state(posteriors.pi) == RegimeLabel.STRESS
        armed = armed_rows(stress_rows, trig_cfg.suppression)

    return DetectorTrace(posteriors, raw, normed, composite, first, normalizer, reference, armed)


def rescore(trace: DetectorTrace, cfg: TriggerConfig) -> DetectorTrace:
    """Same trace with the composite rebuilt for cfg's channels and aggregation."""
    composite, first = aggregate(trace.normed, cfg.channels, cfg.aggregation)
    return replace(trace, composite=composite, first_channel=first)


def _floors(trace: DetectorTrace, cfg: TriggerConfig, series: dict) -> dict:
    if trace.reference is None or trace.normalizer is None:
        return {c: -math.inf for c in series}

    m = trace.normalizer.squash_max
    n_channels = len([c for c in CHANNELS if c in cfg.channels])
    floors = {}
    for name, values in series.items():
        cap = m * n_channels if name == "composite" and cfg.aggregation == "sum" else m
        floors[name] = reference_floor(
            values[trace.reference], cfg.reference_percentile, cfg.floor_margin, m, cap
        )
    return floors


def fire_triggers(
    trace: DetectorTrace,
    cfg: TriggerConfig,
    start: int | None = None,
    stop: int | None = None,
) -> list[TriggerEvent]:
    """
    Run the firing loop over [start, stop).

    Scores before `start` seed the threshold history. The threshold at step t
    only uses scores before t, and never drops below the in-control floor of
    the trace's reference rows. Standard keeps the seeded threshold fixed;
    Adaptive refreshes it every threshold_update_interval steps; Multi runs
    one threshold per channel with a shared suppression window. Rows the
    trace does not arm never fire but still enter the history.
    """
    start = cfg.burn_in if start is None else start
    stop = len(trace) if stop is None else stop
    variant = TriggerVariant(cfg.variant)

    if variant is TriggerVariant.MULTI:
        names = [c for c in CHANNELS if c in cfg.channels]
        series = {c: trace.normed[c].to_numpy(dtype=float) for c in names}
    else:
        names = ["composite"]
        series = {"composite": np.asarray(trace.composite, dtype=float)}

    floors = _floors(trace, cfg, series)
    quantiles = {}
    thresholds = {}
    for c in names:
        q = EmpiricalQuantile(cfg.percentile, cfg.history_cap)
        q.extend(series[c][max(0, start - cfg.history_cap) : start])
        quantiles[c] = q
        thresholds[c] = max(q.value(), floors[c])

    events = []
    t_last = None
    for t in range(start, stop):
        if variant is not TriggerVariant.STANDARD and (t - start) % cfg.threshold_update_interval == 0:
            for c in names:
                thresholds[c] = max(quantiles[c].value(), floors[c])

        armed = trace.armed is None or bool(trace.armed[t])
        for c in names if armed else ():
            s_t = series[c][t]
            s_prev = series[c][t - 1] if t > 0 else -math.inf
            if rising_edge_fire(
                s_t, s_prev, thresholds[c], t, t_last, cfg.suppression, cfg.rising_edge
            ):
                first = c if variant is TriggerVariant.MULTI else str(trace.first_channel[t])
                events.append(
                    TriggerEvent(
                        tau=t,
                        score=float(s_t),
                        threshold=float(thresholds[c]),
                        prev_score=float(s_prev),
                        first_channel=first,
                        variant=variant.value,
                    )
                )
                t_last = t
                break

        for c in names:
            quantiles[c].add(float(series[c][t]))

    return events


def run_detector(
    frames, model: HmmModel, sig_cfg: SignalConfig, trig_cfg: TriggerConfig
) -> list[TriggerEvent]:
    """Validated score-and-fire pass over one stream; triggers start after burn-in."""
    sig_cfg.validate()
    trig_cfg.validate(sig_cfg)
    if len(frames) < trig_cfg.burn_in:
        raise ParameterError(
            f"need at least burn_in={trig_cfg.burn_in} frames, got {len(frames)}"
        )

    trace = score_trace(frames, model, sig_cfg, trig_cfg)
    events = fire_triggers(trace, trig_cfg)
    logger.debug("%d triggers over %d frames", len(events), len(frames))
    return events
