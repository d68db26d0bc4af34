"""
Signal channels for build-up detection.

Four causal channels per timestep (HMM entropy, depth erosion, spread drift,
order-flow momentum), a per-channel normaliser fitted on burn-in, and the
MAX composite with first-channel attribution.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import entropy as shannon_entropy

from src.errors import InputError, ParameterError

logger = logging.getLogger(__name__)

# Order doubles as the tie-break priority in max_aggregate
CHANNELS = ("ent", "dep", "spr", "ofi")


@dataclass(frozen=True)
class SignalConfig:
    w: int = 20
    baseline_window: int = 100
    epsilon: float = 1e-8
    squash_max: float = 3.0
    # Smallest entropy spread (nats) the normaliser divides by
    entropy_floor: float = 0.05

    def validate(self):
        if self.w < 2:
            raise ParameterError(f"w must be >= 2, got {self.w}")
        if self.baseline_window < self.w:
            raise ParameterError("baseline_window must be >= w")
        if self.epsilon <= 0 or self.squash_max <= 0:
            raise ParameterError("epsilon and squash_max must be > 0")
        if self.entropy_floor < 0:
            raise ParameterError("entropy_floor must be >= 0")


@dataclass(frozen=True)
class ChannelScores:
    t: int
    ent: float
    dep: float
    spr: float
    ofi: float
    composite: float
    first_channel: str

    @classmethod
    def from_channels(cls, t, ent, dep, spr, ofi):
        composite, first = max_aggregate({"ent": ent, "dep": dep, "spr": spr, "ofi": ofi})
        return cls(int(t), float(ent), float(dep), float(spr), float(ofi), composite, first)

    def as_record(self) -> dict:
        return {
            "t": self.t,
            "ent": self.ent,
            "dep": self.dep,
            "spr": self.spr,
            "ofi": self.ofi,
            "composite": self.composite,
            "first_channel": self.first_channel,
        }


def entropy_channel(post) -> float:
    """Shannon entropy (nats) of the filtered posterior, 0 ln 0 := 0."""
    return float(shannon_entropy(post.pi))


def depth_erosion_channel(depth_history, cfg: SignalConfig) -> float:
    """
    Relative depth loss against a rolling baseline, gated on decline.

    Math:
        `S_dep = (Dbar - D_t) / Dbar * 1[(D_t - D_{t-w}) / w < 0]`
        Dbar is the mean of up to baseline_window depths ending at t-1.
    """
    D = np.asarray(depth_history, dtype=float)
    if len(D) < max(cfg.baseline_window, cfg.w + 1):
        raise ParameterError("depth history shorter than baseline_window")

    d_bar = D[:-1][-cfg.baseline_window :].mean()
    if d_bar <= cfg.epsilon:
        logger.debug("degenerate depth baseline %.3g", d_bar)
        return 0.0

    declining = (D[-1] - D[-1 - cfg.w]) / cfg.w < 0
    if not declining:
        return 0.0
    return float((d_bar - D[-1]) / d_bar)


def spread_drift_channel(spread_history, cfg: SignalConfig) -> float:
    """
    Mean of the last w spread changes in units of their rolling std.

    Math:
        `S_spr = (1/w) * sum_{j<w} dA_{t-j} / sigma_A`
        sigma_A is the population std of up to baseline_window changes that
        precede the lookback window, floored at epsilon. Returns 0 when fewer
        than two such changes exist.
    """
    A = np.asarray(spread_history, dtype=float)
    if len(A) < cfg.baseline_window + 1:
        raise ParameterError("spread history shorter than baseline_window + 1")

    diffs = np.diff(A)
    window = diffs[-cfg.w :]
    before = diffs[: -cfg.w][-cfg.baseline_window :]
    if len(before) < 2:
        return 0.0

    sigma = max(float(np.std(before)), cfg.epsilon)
    return float(window.mean() / sigma)


def ofi_momentum_channel(imbalance_history, cfg: SignalConfig) -> float:
    """Absolute mean imbalance over the last w steps."""
    imb = np.asarray(imbalance_history, dtype=float)
    if len(imb) < cfg.w:
        raise ParameterError("imbalance history shorter than w")
    if np.any(np.abs(imb) > 1.0):
        raise InputError("imbalance must lie in [-1, 1]")
    return float(abs(imb[-cfg.w :].mean()))


def max_aggregate(scores) -> tuple[float, str]:
    """
    Composite score and the channel attaining it.

    Accepts ChannelScores or a channel -> value mapping. Ties resolve in
    CHANNELS order.
    """
    if isinstance(scores, ChannelScores):
        scores = {c: getattr(scores, c) for c in CHANNELS}
    names = [c for c in CHANNELS if c in scores]
    values = np.array([scores[c] for c in names], dtype=float)
    k = int(np.argmax(values))
    return float(values[k]), names[k]


def channel_series(spread, depth, imbalance, entropy, cfg: SignalConfig) -> pd.DataFrame:
    """
    All four raw channels for a whole stream (columns ent, dep, spr, ofi).

    Value at t uses inputs at indices <= t only. Steps without enough
    history, or with missing inputs in the window, score 0.
    """
    cfg.validate()
    w, B = cfg.w, cfg.baseline_window

    imbalance = pd.Series(imbalance, dtype=float)
    if (imbalance.abs() > 1.0).any():
        raise InputError("imbalance must lie in [-1, 1]")

    D = pd.Series(depth, dtype=float)
    d_bar = D.rolling(B, min_periods=1).mean().shift(1)
    declining = (D - D.shift(w)) < 0
    dep = ((d_bar - D) / d_bar).where(declining & (d_bar > cfg.epsilon), 0.0)
    dep[np.arange(len(D)) < max(B, w + 1) - 1] = 0.0

    dA = pd.Series(spread, dtype=float).diff()
    sigma = dA.rolling(B, min_periods=2).std(ddof=0).shift(w).clip(lower=cfg.epsilon)
    spr = dA.rolling(w).mean() / sigma
    spr[np.arange(len(dA)) < B] = 0.0

    ofi = imbalance.rolling(w).mean().abs()

    frame = pd.DataFrame(
        {
            "ent": pd.Series(entropy, dtype=float).to_numpy(),
            "dep": dep.to_numpy(),
            "spr": spr.to_numpy(),
            "ofi": ofi.to_numpy(),
        }
    )
    return frame.fillna(0.0)


@dataclass(frozen=True)
class ChannelNormalizer:
    """
    Puts channels on a common scale before aggregation.

    Fitted on the in-control reference rows of the burn-in, so z is measured
    in units of stable-market noise.

    Math:
        `z = (x - mean_ref) / max(std_ref, eps)`
        `s = m * tanh(max(z, 0) / m)` with m = squash_max
    The entropy spread is additionally floored at cfg.entropy_floor.
    """

    means: dict
    stds: dict
    squash_max: float = 3.0

    @classmethod
    def fit(cls, raw: pd.DataFrame, cfg: SignalConfig):
        if len(raw) == 0:
            raise ParameterError("cannot fit normaliser on an empty burn-in")
        means = {c: float(raw[c].mean()) for c in raw.columns}
        stds = {c: max(float(raw[c].std(ddof=0)), cfg.epsilon) for c in raw.columns}
        if "ent" in stds:
            stds["ent"] = max(stds["ent"], cfg.entropy_floor)
        return cls(means=means, stds=stds, squash_max=cfg.squash_max)

    def zscores(self, raw: pd.DataFrame) -> pd.DataFrame:
        """Standardised channels, clipped at 0, before the squash."""
        out = {}
        for c in raw.columns:
            z = (raw[c].to_numpy(dtype=float) - self.means[c]) / self.stds[c]
            out[c] = np.clip(z, 0.0, None)
        return pd.DataFrame(out, index=raw.index)

    def transform(self, raw: pd.DataFrame) -> pd.DataFrame:
        m = self.squash_max
        return m * np.tanh(self.zscores(raw) / m)


def aggregate(normed: pd.DataFrame, channels=CHANNELS, how: str = "max"):
    """
    Composite score per row and the channel attributed to it.

    "max" is the production aggregation; "sum" is the equal-weight
    alternative used in ablations. Attribution is the argmax channel in both
    cases.
    """
    cols = [c for c in CHANNELS if c in channels]
    if not cols:
        raise ParameterError("at least one channel is required")
    values = normed[cols].to_numpy(dtype=float)

    if how == "max":
        composite = values.max(axis=1)
    elif how == "sum":
        composite = values.sum(axis=1)
    else:
        raise ParameterError(f"unknown aggregation '{how}'")

    first = np.array(cols, dtype=object)[values.argmax(axis=1)]
    return composite, first


def frame_inputs(frames) -> pd.DataFrame:
    """Channel inputs from simulated frames; imbalance is clipped to [-1, 1]."""
    X = np.asarray(frames, dtype=float)
    return pd.DataFrame(
        {
            "spread": X[:, 0],
            "depth": X[:, 1],
            "imbalance": np.clip(X[:, 2], -1.0, 1.0),
        }
    )
