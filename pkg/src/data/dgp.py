"""Three-regime order book simulator.

A hidden Markov chain moves stable -> build-up -> stress -> stable. Each step
emits a 4-feature frame (spread, depth, imbalance, volatility proxy). Build-up
frames carry a linear drift along a fixed direction that grows with time spent
in the episode; every other frame is stationary Gaussian around its regime
mean.
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import pandas as pd

from src.errors import InputError, ParameterError

logger = logging.getLogger(__name__)

FEATURES = ("spread", "depth", "imbalance", "vol")


class RegimeLabel(IntEnum):
    STABLE = 0
    BUILDUP = 1
    STRESS = 2


@dataclass(frozen=True)
class DgpParams:
    """Parameters of the simulated market.

    mu has one row per regime, sigma is the emission covariance and v the
    unit drift direction. Build the defaults with
    `src.config.load.dgp_params_from_config`.
    """

    p01: float
    p12: float
    p20: float
    mu: np.ndarray
    sigma: np.ndarray
    alpha: float
    v: np.ndarray
    T: int
    rng: str = "PCG64"

    @property
    def d(self) -> int:
        return int(self.mu.shape[1])

    def transition_matrix(self) -> np.ndarray:
        p01, p12, p20 = self.p01, self.p12, self.p20
        return np.array(
            [
                [1.0 - p01, p01, 0.0],
                [0.0, 1.0 - p12, p12],
                [p20, 0.0, 1.0 - p20],
            ]
        )

    def noise_std_along_drift(self) -> float:
        return float(np.sqrt(self.v @ self.sigma @ self.v))

    def eta(self) -> float:
        """Per-step drift-to-noise ratio alpha / sqrt(v' Sigma v)."""
        return self.alpha / self.noise_std_along_drift()

    def validate(self):
        for name in ("p01", "p12", "p20"):
            p = getattr(self, name)
            if not 0.0 < p < 1.0:
                raise ParameterError(f"{name} must be in (0, 1), got {p}")

        if self.mu.ndim != 2 or self.mu.shape[0] != 3:
            raise ParameterError(f"mu must be 3 x d, got shape {self.mu.shape}")
        d = self.d
        if self.sigma.shape != (d, d):
            raise ParameterError(f"sigma must be {d} x {d}, got {self.sigma.shape}")
        if self.v.shape != (d,):
            raise ParameterError(f"v must have length {d}, got {self.v.shape}")

        if abs(np.linalg.norm(self.v) - 1.0) > 1e-9:
            raise ParameterError("drift direction v must have unit norm")
        if not np.allclose(self.sigma, self.sigma.T):
            raise ParameterError("sigma must be symmetric")
        try:
            np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError:
            raise ParameterError("sigma must be positive definite")

        if self.alpha < 0:
            raise ParameterError("alpha must be >= 0")
        if self.T < 0:
            raise ParameterError("T must be >= 0")


@dataclass(frozen=True)
class SimRun:
    """One simulated run: frames (T x d) with their true regime labels."""

    frames: np.ndarray
    labels: np.ndarray
    seed: int

    def __len__(self):
        return len(self.labels)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.frames, columns=list(FEATURES[: self.frames.shape[1]]))
        df.insert(0, "label", self.labels.astype(int))
        df.insert(0, "t", np.arange(len(self.labels)))
        return df


@dataclass(frozen=True)
class Episode:
    """A build-up segment followed by stress. Indices are timesteps."""

    buildup_start: int
    stress_onset: int
    stress_end: int
    t1_obs: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "t1_obs", self.stress_onset - self.buildup_start)


def make_rng(params: DgpParams, seed: int) -> np.random.Generator:
    """Seeded generator over the configured bit generator."""
    bit_generator = getattr(np.random, params.rng)
    return np.random.Generator(bit_generator(seed))


def stationary_distribution(params: DgpParams) -> np.ndarray:
    """Long-run regime occupancy: left eigenvector of P for eigenvalue 1."""
    eigvals, eigvecs = np.linalg.eig(params.transition_matrix().T)
    k = int(np.argmin(np.abs(eigvals - 1.0)))
    pi = np.real(eigvecs[:, k])
    return pi / pi.sum()


def regime_reference_means(params: DgpParams) -> np.ndarray:
    """Expected emission mean per regime.

    Build-up shares the stable mean and only differs through drift, so its
    reference sits at the drift reached halfway through an average episode.
    """
    ref = params.mu.astype(float).copy()
    ref[RegimeLabel.BUILDUP] = ref[RegimeLabel.BUILDUP] + params.alpha * (
        0.5 / params.p12
    ) * params.v
    return ref


def sample_regime_path(params: DgpParams, seed: int) -> np.ndarray:
    """
    Draw a regime path of length T starting in Stable.

    Math:
        Each regime has a single exit (0 -> 1 -> 2 -> 0), so a step leaves
        regime z with probability p_exit[z] and otherwise stays. This is the
        transition matrix with its two structural zeros.
    """
    params.validate()
    rng = make_rng(params, seed)

    T = params.T
    labels = np.zeros(T, dtype=np.int8)
    if T == 0:
        return labels

    p_exit = np.array([params.p01, params.p12, params.p20])
    uniforms = rng.random(T)

    state = RegimeLabel.STABLE
    for t in range(1, T):
        if uniforms[t] < p_exit[state]:
            state = (state + 1) % 3
        labels[t] = state

    return labels


def emit_observations(labels: np.ndarray, params: DgpParams, seed: int) -> np.ndarray:
    """
    Emit one frame per label.

    Math:
        `X_t = mu[Z_t] + alpha * (t - t_entry) * v * 1[Z_t = 1] + eps_t`
        with eps_t ~ N(0, Sigma) and t_entry the first step of the current
        build-up episode (so drift is 0 on that first step).
    """
    params.validate()
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 2):
        raise ParameterError("labels must be regime indices 0, 1 or 2")

    rng = make_rng(params, seed)
    T, d = len(labels), params.d

    chol = np.linalg.cholesky(params.sigma)
    noise = rng.standard_normal((T, d)) @ chol.T

    frames = params.mu[labels] + noise

    # Steps since entry into the current build-up episode
    in_buildup = labels == RegimeLabel.BUILDUP
    steps = np.zeros(T)
    run = 0
    for t in range(T):
        if in_buildup[t]:
            steps[t] = run
            run += 1
        else:
            run = 0

    frames += params.alpha * steps[:, None] * params.v[None, :]
    return frames


def simulate_run(params: DgpParams, seed: int) -> SimRun:
    """Regime path plus emissions, reproducible for a given (params, seed)."""
    path_seed, emit_seed = np.random.SeedSequence(seed).generate_state(2)

    labels = sample_regime_path(params, int(path_seed))
    frames = emit_observations(labels, params, int(emit_seed))

    return SimRun(frames=frames, labels=labels, seed=seed)


def extract_episodes(labels) -> list[Episode]:
    """
    One Episode per maximal build-up segment that ends in stress.

    A build-up cut off by the end of the run yields nothing.
    """
    labels = np.asarray(labels)
    episodes = []
    T = len(labels)

    t = 0
    while t < T:
        if labels[t] != RegimeLabel.BUILDUP:
            t += 1
            continue

        start = t
        while t < T and labels[t] == RegimeLabel.BUILDUP:
            t += 1
        if t == T or labels[t] != RegimeLabel.STRESS:
            continue

        onset = t
        while t < T and labels[t] == RegimeLabel.STRESS:
            t += 1
        episodes.append(Episode(start, onset, t - 1))

    return episodes


def forbidden_transitions(labels) -> int:
    """Count of 0->2 and 1->0 steps (always zero for a valid path)."""
    labels = np.asarray(labels)
    prev, nxt = labels[:-1], labels[1:]
    bad = ((prev == 0) & (nxt == 2)) | ((prev == 1) & (nxt == 0))
    return int(bad.sum())


def write_run_csv(run: SimRun, output_path):
    """Write a run as CSV (t, label, spread, depth, imbalance, vol)."""
    run.to_frame().to_csv(output_path, index=False, float_format="%.17g")


def read_run_csv(path, seed: int = -1) -> SimRun:
    """Load a run written by write_run_csv."""
    df = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in ("t", "label", *FEATURES) if c not in df.columns]
    if missing:
        raise InputError(f"{path}: missing columns {missing}")

    return SimRun(
        frames=df[list(FEATURES)].to_numpy(dtype=float),
        labels=df["label"].to_numpy(dtype=np.int8),
        seed=seed,
    )
