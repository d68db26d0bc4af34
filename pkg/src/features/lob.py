"""
Order-book features in 1-second bins, causal normalisation, intraday
deseasonalisation and the spread-based stress label.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from src.data.snapshots import n_levels_of, snapshots_to_frame
from src.errors import InputError, ParameterError

logger = logging.getLogger(__name__)

FEATURE_COLUMNS = ("spread", "depth", "imbalance", "vol")


@dataclass(frozen=True)
class StressLabel:
    """A sustained spread blow-out; onset is a bin index."""

    onset: int
    duration: int


def _side_volume(df: pd.DataFrame, side: str, levels: int) -> pd.Series:
    cols = [f"{side}_vol_{i}" for i in range(1, levels + 1)]
    return df[cols].sum(axis=1)


def bin_snapshots(
    snapshots,
    vol_window: int = 60,
    smooth_seconds: int = 5,
    max_ffill: int = 3,
    depth_levels: int = 5,
) -> pd.DataFrame:
    """
    Aggregate snapshots into 1-second bins.

    Each bin takes the last snapshot inside it. Features:
        spread     2 * (mid - best bid)
        depth      top-`depth_levels` volume, both sides
        imbalance  (bid_vol - ask_vol) / (bid_vol + ask_vol), same levels
        vol        rolling std of log mid returns over vol_window bins
        d_spread, d_depth  first differences, trailing Gaussian smoothing
    Empty bins are forward-filled for up to max_ffill bins; beyond that they
    are marked missing and carry NaN features. Crossed books are dropped and
    counted in `attrs["n_crossed"]`.
    """
    df = snapshots if isinstance(snapshots, pd.DataFrame) else snapshots_to_frame(snapshots)

    columns = ["timestamp", "t", *FEATURE_COLUMNS, "d_spread", "d_depth", "missing"]
    if len(df) == 0:
        out = pd.DataFrame(columns=columns)
        out.attrs["n_crossed"] = 0
        return out

    ts = df["timestamp"].to_numpy(dtype=np.int64)
    if np.any(np.diff(ts) < 0):
        raise InputError("snapshots must be time-sorted")

    crossed = (df["bid_px_1"] >= df["ask_px_1"]).to_numpy()
    n_crossed = int(crossed.sum())
    if n_crossed:
        logger.warning("dropped %d crossed snapshots", n_crossed)
    df = df.loc[~crossed]

    levels = min(depth_levels, n_levels_of(df))
    sec = df["timestamp"].to_numpy(dtype=np.int64) // 1000

    best_bid = df["bid_px_1"].to_numpy(dtype=float)
    best_ask = df["ask_px_1"].to_numpy(dtype=float)
    mid = (best_bid + best_ask) / 2.0
    bid_vol = _side_volume(df, "bid", levels).to_numpy(dtype=float)
    ask_vol = _side_volume(df, "ask", levels).to_numpy(dtype=float)

    per_snapshot = pd.DataFrame(
        {
            "sec": sec,
            "mid": mid,
            "spread": 2.0 * (mid - best_bid),
            "depth": bid_vol + ask_vol,
            "imbalance": (bid_vol - ask_vol) / (bid_vol + ask_vol + 1e-9),
        }
    )
    last = per_snapshot.drop_duplicates("sec", keep="last").set_index("sec")

    if len(last) == 0:
        out = pd.DataFrame(columns=columns)
        out.attrs["n_crossed"] = n_crossed
        return out

    full = np.arange(last.index.min(), last.index.max() + 1)
    bins = last.reindex(full)
    observed = bins["mid"].notna()
    bins = bins.ffill(limit=max_ffill)
    missing = bins["mid"].isna()

    log_ret = np.log(bins["mid"]).diff()
    bins["vol"] = log_ret.rolling(vol_window, min_periods=2).std()

    std = max(smooth_seconds / 2.0, 1e-3)
    for col in ("spread", "depth"):
        bins[f"d_{col}"] = (
            bins[col].diff().rolling(smooth_seconds, win_type="gaussian", min_periods=1).mean(std=std)
        )

    bins.loc[missing, list(FEATURE_COLUMNS) + ["d_spread", "d_depth"]] = np.nan

    out = pd.DataFrame(
        {
            "timestamp": pd.to_datetime(full, unit="s", utc=True),
            "t": np.arange(len(full)),
            "spread": bins["spread"].to_numpy(),
            "depth": bins["depth"].to_numpy(),
            "imbalance": bins["imbalance"].to_numpy(),
            "vol": bins["vol"].to_numpy(),
            "d_spread": bins["d_spread"].to_numpy(),
            "d_depth": bins["d_depth"].to_numpy(),
            "missing": missing.to_numpy(),
        }
    )
    out.attrs["n_crossed"] = n_crossed
    out.attrs["n_filled"] = int((~observed & ~missing).sum())
    return out


def causal_zscore(
    features: pd.DataFrame,
    columns=FEATURE_COLUMNS,
    window: int = 1800,
    epsilon: float = 1e-8,
    min_periods: int | None = None,
) -> pd.DataFrame:
    """
    Rolling z-score against the previous `window` bins only.

    Math:
        `z_t = (x_t - mean(x_{t-window..t-1})) / max(std(...), eps)`
    Bins without `min_periods` (default: window) bins of history are NaN.
    """
    min_periods = window if min_periods is None else min_periods
    out = {}
    for col in columns:
        x = features[col].astype(float)
        roll = x.rolling(window, min_periods=min_periods)
        mean = roll.mean().shift(1)
        std = roll.std(ddof=0).shift(1).clip(lower=epsilon)
        out[col] = (x - mean) / std
    return pd.DataFrame(out, index=features.index)


def deseasonalize(
    features: pd.DataFrame,
    training_days,
    columns=("spread", "depth"),
    keep_level: bool = False,
) -> tuple[pd.DataFrame, bool]:
    """
    Subtract per-(weekday, hour) medians estimated on training days.

    Only rows whose UTC date is in training_days contribute to the medians.
    A (weekday, hour) cell absent from training falls back to the
    hour-of-day median (then to the overall median) and sets the returned
    flag. keep_level adds the overall training median back so features keep
    their level. Returns (adjusted copy, fallback_used).
    """
    stamps = pd.DatetimeIndex(features["timestamp"])
    dates = stamps.normalize()
    training = pd.DatetimeIndex(pd.to_datetime(list(training_days), utc=True)).normalize()

    in_train = dates.isin(training)
    if not in_train.any():
        raise ParameterError("no feature rows fall on the training days")
    eval_dates = dates[~in_train]
    if len(eval_dates) and training.max() >= eval_dates.min():
        raise ParameterError("training days must strictly precede the evaluation span")

    keys = pd.DataFrame({"weekday": stamps.weekday, "hour": stamps.hour}, index=features.index)
    train = features.loc[in_train]
    train_keys = keys.loc[in_train]

    out = features.copy()
    fallback = False
    for col in columns:
        values = train[col].astype(float)
        by_cell = values.groupby([train_keys["weekday"], train_keys["hour"]]).median()
        by_hour = values.groupby(train_keys["hour"]).median()
        overall = float(values.median())

        cell_idx = pd.MultiIndex.from_arrays([keys["weekday"], keys["hour"]])
        median = pd.Series(by_cell.reindex(cell_idx).to_numpy(), index=features.index)
        gaps = median.isna()
        if gaps.any():
            fallback = True
            median[gaps] = keys.loc[gaps, "hour"].map(by_hour).to_numpy()
            median = median.fillna(overall)

        out[col] = features[col].astype(float) - median
        if keep_level:
            out[col] += overall

    if fallback:
        logger.warning("seasonal medians fell back to hour-of-day for some rows")
    return out, fallback


def spread_blowout(features: pd.DataFrame, multiplier: float = 3.0, median_window: int = 600) -> np.ndarray:
    """
    Bins whose spread exceeds `multiplier` times the median of the previous
    `median_window` bins. Causal; bins without a full window are False.
    """
    spread = features["spread"].astype(float)
    median = spread.rolling(median_window, min_periods=median_window).median().shift(1)
    return (spread > multiplier * median).to_numpy()


def label_stress(
    features: pd.DataFrame,
    multiplier: float = 3.0,
    median_window: int = 600,
    min_duration: int = 30,
) -> list[StressLabel]:
    """
    Spans where spread exceeds `multiplier` times its trailing median for at
    least `min_duration` consecutive bins.

    The median covers the previous `median_window` bins (needs a full
    window). Missing bins end a span.
    """
    exceed = spread_blowout(features, multiplier, median_window)

    labels = []
    edges = np.diff(np.concatenate(([0], exceed.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    for start, stop in zip(starts, stops):
        if stop - start >= min_duration:
            labels.append(StressLabel(onset=int(start), duration=int(stop - start)))
    return labels
