"""
Recorded order-book snapshots: CSV schema, readers/writers and a synthetic
fixture generator for replay tests.

Schema (one file per day, header mandatory):
    timestamp, bid_px_1, bid_vol_1, ..., bid_px_N, bid_vol_N,
    ask_px_1, ask_vol_1, ..., ask_px_N, ask_vol_N
timestamp is epoch milliseconds, N <= 20, level 1 is the top of book.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from src.data.dgp import DgpParams, RegimeLabel, emit_observations
from src.errors import InputError

logger = logging.getLogger(__name__)

MAX_LEVELS = 20
_LEVEL_RE = re.compile(r"^bid_px_(\d+)$")


@dataclass(frozen=True)
class RawSnapshot:
    """One book snapshot; bids and asks are (levels x 2) price/volume arrays."""

    timestamp: int
    bids: np.ndarray
    asks: np.ndarray

    @property
    def crossed(self) -> bool:
        return bool(self.bids[0, 0] >= self.asks[0, 0])

    def validate(self):
        if self.crossed:
            raise InputError(f"crossed book at {self.timestamp}")
        if np.any(np.diff(self.bids[:, 0]) > 0) or np.any(np.diff(self.asks[:, 0]) < 0):
            raise InputError(f"levels not price-sorted at {self.timestamp}")
        if np.any(self.bids[:, 1] <= 0) or np.any(self.asks[:, 1] <= 0):
            raise InputError(f"non-positive volume at {self.timestamp}")


def snapshot_columns(n_levels: int) -> list[str]:
    if not 1 <= n_levels <= MAX_LEVELS:
        raise InputError(f"book depth must be 1..{MAX_LEVELS} levels, got {n_levels}")
    cols = ["timestamp"]
    for side in ("bid", "ask"):
        for i in range(1, n_levels + 1):
            cols += [f"{side}_px_{i}", f"{side}_vol_{i}"]
    return cols


def n_levels_of(df: pd.DataFrame) -> int:
    """Number of book levels encoded in a snapshot frame's header."""
    levels = [int(m.group(1)) for c in df.columns if (m := _LEVEL_RE.match(c))]
    if not levels:
        raise InputError("no bid_px_<i> columns in snapshot data")
    return max(levels)


def snapshots_to_frame(snapshots) -> pd.DataFrame:
    snapshots = list(snapshots)
    if not snapshots:
        return pd.DataFrame(columns=snapshot_columns(1))

    n = min(len(s.bids) for s in snapshots)
    rows = []
    for s in snapshots:
        row = [s.timestamp]
        for book in (s.bids, s.asks):
            row += book[:n].reshape(-1).tolist()
        rows.append(row)
    df = pd.DataFrame(rows, columns=snapshot_columns(n))
    df["timestamp"] = df["timestamp"].astype("int64")
    return df


def frame_to_snapshots(df: pd.DataFrame) -> list[RawSnapshot]:
    n = n_levels_of(df)
    bid_cols = [c for i in range(1, n + 1) for c in (f"bid_px_{i}", f"bid_vol_{i}")]
    ask_cols = [c for i in range(1, n + 1) for c in (f"ask_px_{i}", f"ask_vol_{i}")]
    bids = df[bid_cols].to_numpy(dtype=float).reshape(len(df), n, 2)
    asks = df[ask_cols].to_numpy(dtype=float).reshape(len(df), n, 2)
    return [
        RawSnapshot(int(ts), b, a)
        for ts, b, a in zip(df["timestamp"].to_numpy(), bids, asks)
    ]


def read_snapshots_csv(path) -> pd.DataFrame:
    """Read one day of snapshots; the header fixes the number of levels."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Snapshot file not found: {path}")

    df = pd.read_csv(path)
    n = n_levels_of(df)
    expected = snapshot_columns(n)
    if list(df.columns) != expected:
        raise InputError(f"{path}: header does not match the snapshot schema for {n} levels")

    ts = df["timestamp"].to_numpy()
    if np.any(np.diff(ts) < 0):
        raise InputError(f"{path}: snapshots are not time-sorted")
    return df


def write_snapshots_csv(df: pd.DataFrame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = df[snapshot_columns(n_levels_of(df))]
    df.to_csv(path, index=False, float_format="%.6f")


def _planted_regimes(n_seconds, episode_starts, buildup_seconds, stress_seconds):
    labels = np.full(n_seconds, RegimeLabel.STABLE, dtype=np.int8)
    for start in episode_starts:
        onset = start + buildup_seconds
        labels[start:onset] = RegimeLabel.BUILDUP
        labels[onset : onset + stress_seconds] = RegimeLabel.STRESS
    return labels


def fixture_params(n_seconds: int, buildup_seconds: int = 100, stress_seconds: int = 60) -> DgpParams:
    """
    Simulator parameters for a 1 Hz book, one frame per second.

    Frame columns are spread (ticks), top-of-book depth (lots, both sides),
    imbalance and a mid-noise scale. Stable books sit near 2 ticks and 50
    lots; a build-up widens the spread by about 1.5 ticks and drains about
    30 lots, mostly from the bid side, over 100 s; stress books sit at 12-13
    ticks with 10 lots and four times the mid noise.
    """
    v = np.array([0.05, -1.0, -0.01, 0.0])
    mu = np.array(
        [
            [2.2, 50.0, 0.0, 1.0],
            [2.2, 50.0, 0.0, 1.0],
            [12.5, 10.0, 0.0, 4.0],
        ]
    )
    return DgpParams(
        p01=0.001,
        p12=1.0 / buildup_seconds,
        p20=1.0 / stress_seconds,
        mu=mu,
        sigma=np.diag([0.16, 4.0, 0.0025, 0.0025]),
        alpha=0.3,
        v=v / np.linalg.norm(v),
        T=n_seconds,
    )


def render_session(
    day_start: pd.Timestamp,
    frames: np.ndarray,
    rng: np.random.Generator,
    n_levels: int = 5,
    tick: float = 0.01,
) -> pd.DataFrame:
    """
    One 1 Hz snapshot per simulated frame.

    Spread is rounded to whole ticks (at least one), depth is split between
    the sides by the imbalance and spread evenly over the levels, and the
    mid follows a random walk whose step scales with the noise column.
    """
    X = np.asarray(frames, dtype=float)
    T = len(X)

    spread = np.maximum(np.round(X[:, 0]), 1.0) * tick
    depth = np.maximum(X[:, 1], 2.0)
    bid_share = np.clip((1.0 + X[:, 2]) / 2.0, 0.05, 0.95)

    noise = 0.002 * np.maximum(X[:, 3], 0.25)
    mid = 100.0 + np.cumsum(rng.normal(0.0, 1.0, T) * noise)

    base_ms = int(day_start.value // 1_000_000)
    data = {"timestamp": base_ms + np.arange(T, dtype=np.int64) * 1000}
    for side, share, sign in (("bid", bid_share, -1.0), ("ask", 1.0 - bid_share, 1.0)):
        for i in range(1, n_levels + 1):
            data[f"{side}_px_{i}"] = mid + sign * (spread / 2.0 + (i - 1) * tick)
            data[f"{side}_vol_{i}"] = np.maximum(depth * share / n_levels, 0.1)

    return pd.DataFrame(data, columns=snapshot_columns(n_levels))


def generate_replay_fixture(
    out_dir,
    n_episodes: int = 5,
    seed: int = 0,
    n_days: int = 2,
    session_hours: float = 3.0,
    first_episode_minutes: float = 65.0,
    spacing_minutes: float = 20.0,
    buildup_seconds: int = 100,
    stress_seconds: int = 60,
    start: str = "2024-01-08 09:00",
) -> list[Path]:
    """
    Write `n_days` daily snapshot files with planted build-up -> stress
    episodes, 24 hours apart.

    Each day's frames come from the simulator's emission model on the
    planted regime path, so build-ups drift exactly as simulated runs do.
    Returns the file paths and writes the planted schedule (stress onsets in
    seconds from session open) to episodes.csv.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_seconds = int(session_hours * 3600)
    starts = [
        int((first_episode_minutes + k * spacing_minutes) * 60) for k in range(n_episodes)
    ]
    if starts and starts[-1] + buildup_seconds + stress_seconds > n_seconds:
        raise InputError("planted episodes do not fit in the session")

    labels = _planted_regimes(n_seconds, starts, buildup_seconds, stress_seconds)
    params = fixture_params(n_seconds, buildup_seconds, stress_seconds)
    day0 = pd.Timestamp(start, tz="UTC")

    paths = []
    schedule = []
    for day, child in enumerate(np.random.SeedSequence(seed).spawn(n_days)):
        emit_seed, book_seed = child.generate_state(2)
        frames = emit_observations(labels, params, int(emit_seed))
        rng = np.random.Generator(np.random.PCG64(int(book_seed)))

        day_start = day0 + pd.Timedelta(days=day)
        session = render_session(day_start, frames, rng)
        path = out_dir / f"snapshots_{day_start:%Y%m%d}.csv"
        write_snapshots_csv(session, path)
        paths.append(path)
        schedule += [
            {"day": day, "buildup_start": s, "stress_onset": s + buildup_seconds}
            for s in starts
        ]

    pd.DataFrame(schedule, columns=["day", "buildup_start", "stress_onset"]).to_csv(
        out_dir / "episodes.csv", index=False
    )
    logger.info("wrote %d fixture days with %d episodes each to %s", n_days, n_episodes, out_dir)
    return paths
