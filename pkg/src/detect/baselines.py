"""
Comparison detectors: CUSUM, Bayesian online change-point detection, HMM
posterior threshold, and level thresholds on imbalance and volatility.

All of them take a detection start index (alarms before it are never
emitted) and the same suppression window as the trigger detector.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import t as student_t

from src.detect.trigger import adaptive_threshold
from src.errors import ParameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BaselineConfig:
    percentile: float = 85.0
    bocpd_hazard: float = 0.035
    bocpd_alarm: float = 0.5
    bocpd_max_run: int = 2000
    reference_percentile: float = 99.0
    floor_margin: float = 2.5

    def validate(self):
        if not 0.0 < self.percentile < 100.0:
            raise ParameterError("baseline percentile must be in (0, 100)")
        if not 50.0 <= self.reference_percentile <= 100.0 or self.floor_margin < 0:
            raise ParameterError("reference_percentile must be in [50, 100] and floor_margin >= 0")
        if not 0.0 < self.bocpd_hazard < 1.0:
            raise ParameterError("bocpd_hazard must be in (0, 1)")
        if not 0.0 < self.bocpd_alarm < 1.0:
            raise ParameterError("bocpd_alarm must be in (0, 1)")
        if self.bocpd_max_run < 2:
            raise ParameterError("bocpd_max_run must be >= 2")


def _level_alarms(stat, theta, suppression=0, start=0) -> list[int]:
    """Steps t >= start where stat > theta, at least suppression+1 apart."""
    alarms = []
    last = None
    for t in np.flatnonzero(np.asarray(stat, dtype=float) > theta):
        t = int(t)
        if t < start:
            continue
        if last is None or t - last > suppression:
            alarms.append(t)
            last = t
    return alarms


# --- CUSUM -------------------------------------------------------------------


@dataclass
class CusumState:
    """One-sided upper CUSUM with reset after each alarm."""

    mu0: float
    k_ref: float
    h: float
    c: float = 0.0

    def update(self, y: float) -> bool:
        self.c = max(0.0, self.c + y - self.mu0 - self.k_ref)
        if self.c > self.h:
            self.c = 0.0
            return True
        return False


def cusum_statistic(series, mu0: float, k_ref: float) -> np.ndarray:
    """CUSUM path without resets (used to calibrate h)."""
    out = np.empty(len(series))
    c = 0.0
    for i, y in enumerate(np.asarray(series, dtype=float)):
        c = max(0.0, c + y - mu0 - k_ref)
        out[i] = c
    return out


def calibrate_cusum_h(burn_in_series, mu0: float, k_ref: float, percentile: float, in_control=None) -> float:
    """
    p-th percentile of the positive burn-in statistic, floored at k_ref.

    in_control keeps only the flagged burn-in rows (run back to back), so
    build-up and stress steps do not inflate h.
    """
    series = np.asarray(burn_in_series, dtype=float)
    if in_control is not None:
        series = series[np.asarray(in_control, dtype=bool)[: len(series)]]
    stat = cusum_statistic(series[np.isfinite(series)], mu0, k_ref)
    positive = stat[stat > 0]
    if len(positive) == 0:
        return float(k_ref)
    return float(max(adaptive_threshold(positive.tolist(), percentile), k_ref))


def cusum_detect(series, mu0: float, k_ref: float, h: float, suppression: int = 0, start: int = 0):
    """
    Multi-alarm CUSUM.

    Math:
        `C_t = max(0, C_{t-1} + y_t - mu0 - k)`; alarm when C_t > h, then
        C resets to 0 and the recursion continues.
    """
    if h <= 0:
        raise ParameterError("CUSUM threshold h must be > 0")

    state = CusumState(mu0=mu0, k_ref=k_ref, h=h)
    alarms = []
    last = None
    for t, y in enumerate(np.asarray(series, dtype=float)):
        if np.isnan(y):
            continue
        if state.update(y) and t >= start and (last is None or t - last > suppression):
            alarms.append(t)
            last = t
    return alarms


# --- BOCPD -------------------------------------------------------------------


@dataclass(frozen=True)
class NigPrior:
    """Normal-Inverse-Gamma prior on an unknown mean and variance."""

    mu0: float = 0.0
    kappa0: float = 1.0
    alpha0: float = 1.0
    beta0: float = 1.0

    @classmethod
    def from_burn_in(cls, series, var_floor: float = 1e-6):
        x = np.asarray(series, dtype=float)
        x = x[np.isfinite(x)]
        if len(x) < 2:
            raise ParameterError("need at least two burn-in values for the BOCPD prior")
        return cls(mu0=float(x.mean()), kappa0=1.0, alpha0=1.0, beta0=max(float(x.var()), var_floor))


@dataclass
class BocpdState:
    """
    Run-length posterior with per-run-length sufficient statistics.

    r_t = 0 means x_t opens a new segment. Run lengths beyond max_run fold
    their mass into the longest tracked run.
    """

    prior: NigPrior
    hazard: float
    max_run: int = 2000
    log_r: np.ndarray = field(default=None)
    mu: np.ndarray = field(default=None)
    kappa: np.ndarray = field(default=None)
    alpha: np.ndarray = field(default=None)
    beta: np.ndarray = field(default=None)

    def _posterior_params(self, mu, kappa, alpha, beta, x):
        return (
            (kappa * mu + x) / (kappa + 1.0),
            kappa + 1.0,
            alpha + 0.5,
            beta + kappa * (x - mu) ** 2 / (2.0 * (kappa + 1.0)),
        )

    @staticmethod
    def _log_predictive(mu, kappa, alpha, beta, x):
        scale = np.sqrt(beta * (kappa + 1.0) / (alpha * kappa))
        return student_t.logpdf(x, df=2.0 * alpha, loc=mu, scale=scale)

    @property
    def posterior(self) -> np.ndarray:
        return np.exp(self.log_r)

    def update(self, x: float) -> float:
        """Absorb x and return P(r_t = 0 | x_1..t)."""
        p = self.prior
        if self.log_r is None:
            mu, kappa, alpha, beta = self._posterior_params(p.mu0, p.kappa0, p.alpha0, p.beta0, x)
            self.log_r = np.zeros(1)
            self.mu, self.kappa = np.array([mu]), np.array([kappa])
            self.alpha, self.beta = np.array([alpha]), np.array([beta])
            return 1.0

        log_pred_runs = self._log_predictive(self.mu, self.kappa, self.alpha, self.beta, x)
        log_pred_new = self._log_predictive(p.mu0, p.kappa0, p.alpha0, p.beta0, x)

        log_growth = self.log_r + np.log1p(-self.hazard) + log_pred_runs
        log_change = np.log(self.hazard) + log_pred_new
        log_joint = np.concatenate(([log_change], log_growth))
        log_joint -= logsumexp(log_joint)

        mu, kappa, alpha, beta = self._posterior_params(self.mu, self.kappa, self.alpha, self.beta, x)
        new0 = self._posterior_params(p.mu0, p.kappa0, p.alpha0, p.beta0, x)
        self.mu = np.concatenate(([new0[0]], mu))
        self.kappa = np.concatenate(([new0[1]], kappa))
        self.alpha = np.concatenate(([new0[2]], alpha))
        self.beta = np.concatenate(([new0[3]], beta))
        self.log_r = log_joint

        if len(self.log_r) > self.max_run:
            self.log_r[-2] = np.logaddexp(self.log_r[-2], self.log_r[-1])
            for name in ("log_r", "mu", "kappa", "alpha", "beta"):
                setattr(self, name, getattr(self, name)[:-1])

        return float(np.exp(self.log_r[0]))


def bocpd_run_length_posteriors(series, hazard: float, prior: NigPrior, max_run: int = 2000):
    """Run-length posterior after every step (index r = run length)."""
    state = BocpdState(prior=prior, hazard=hazard, max_run=max_run)
    out = []
    for x in np.asarray(series, dtype=float):
        state.update(float(x))
        out.append(state.posterior)
    return out


def bocpd_detect(
    series,
    hazard: float,
    alarm_threshold: float,
    prior: NigPrior | None = None,
    suppression: int = 0,
    start: int = 0,
    max_run: int = 2000,
):
    """
    Alarm when P(r_t = 0 | x_1..t) exceeds alarm_threshold.

    The prior defaults to moments of the first `start` values (the burn-in).
    Missing values are skipped. The first observation never alarms.
    """
    if not 0.0 < hazard < 1.0:
        raise ParameterError("hazard must be in (0, 1)")
    if not 0.0 < alarm_threshold < 1.0:
        raise ParameterError("alarm_threshold must be in (0, 1)")

    x = np.asarray(series, dtype=float)
    if prior is None:
        prior = NigPrior.from_burn_in(x[: max(start, 2)])

    state = BocpdState(prior=prior, hazard=hazard, max_run=max_run)
    alarms = []
    last = None
    first = True
    for t, value in enumerate(x):
        if np.isnan(value):
            continue
        p_change = state.update(float(value))
        if first:
            first = False
            continue
        if p_change > alarm_threshold and t >= start and (last is None or t - last > suppression):
            alarms.append(t)
            last = t
    return alarms


# --- Level thresholds ----------------------------------------------------------


def hmm_posterior_detect(posteriors, theta_hmm: float, stable_state: int = 0, suppression: int = 0, start: int = 0):
    """
    Alarm when the filtered probability of being outside the stable regime
    exceeds theta_hmm. Accepts a (T, 3) array or a sequence of PosteriorState.
    """
    if not 0.0 < theta_hmm < 1.0:
        raise ParameterError("theta_hmm must be in (0, 1)")
    pi = _as_pi_array(posteriors)
    return _level_alarms(1.0 - pi[:, stable_state], theta_hmm, suppression, start)


def imbalance_detect(imbalance, theta_imb: float, suppression: int = 0, start: int = 0):
    if theta_imb <= 0:
        raise ParameterError("theta_imb must be > 0")
    return _level_alarms(np.abs(np.asarray(imbalance, dtype=float)), theta_imb, suppression, start)


def volatility_detect(vol, theta_vol: float, suppression: int = 0, start: int = 0):
    if theta_vol <= 0:
        raise ParameterError("theta_vol must be > 0")
    return _level_alarms(vol, theta_vol, suppression, start)


def _as_pi_array(posteriors) -> np.ndarray:
    if isinstance(posteriors, np.ndarray):
        return np.atleast_2d(posteriors)
    if hasattr(posteriors, "pi") and isinstance(posteriors.pi, np.ndarray) and posteriors.pi.ndim == 2:
        return posteriors.pi
    return np.array([p.pi for p in posteriors], dtype=float)


def percentile_threshold(
    values,
    percentile: float,
    lower: float | None = None,
    upper: float | None = None,
    reference_percentile: float | None = None,
    margin: float = 0.0,
) -> float:
    """
    Burn-in calibration shared by the level detectors.

    With reference_percentile set the threshold is also held above the
    in-control floor `q_ref + margin * std` of the same values, then
    clamped to [lower, upper].
    """
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    theta = adaptive_threshold(values.tolist(), percentile)
    if reference_percentile is not None and len(values):
        q_ref = adaptive_threshold(values.tolist(), reference_percentile)
        theta = max(theta, q_ref + margin * float(values.std()))
    if lower is not None:
        theta = max(theta, lower)
    if upper is not None:
        theta = min(theta, upper)
    return float(theta)
