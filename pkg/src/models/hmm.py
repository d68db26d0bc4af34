"""Three-state Gaussian HMM: Baum-Welch fitting with restarts and an online
log-space forward filter.

Fitting is delegated to hmmlearn. Filtering is done here one step at a time so
it can run inside a streaming detector loop.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from hmmlearn.base import ConvergenceMonitor
from hmmlearn.hmm import GaussianHMM
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp
from scipy.stats import entropy as shannon_entropy
from scipy.stats import multivariate_normal

from src.errors import InputError, ParameterError

logger = logging.getLogger(__name__)

N_STATES = 3


@dataclass(frozen=True)
class HmmModel:
    """Fitted parameters. State i is hmmlearn's component i (unaligned)."""

    trans: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    init: np.ndarray
    log_likelihood: float = float("nan")
    em_trace: tuple = ()

    @property
    def n_states(self) -> int:
        return int(self.trans.shape[0])

    @property
    def d(self) -> int:
        return int(self.means.shape[1])

    def occupancy(self) -> np.ndarray:
        """Long-run state occupancy implied by trans."""
        eigvals, eigvecs = np.linalg.eig(self.trans.T)
        k = int(np.argmin(np.abs(eigvals - 1.0)))
        pi = np.abs(np.real(eigvecs[:, k]))
        return pi / pi.sum()

    def validate(self):
        K = self.n_states
        if self.trans.shape != (K, K) or np.any(self.trans < 0):
            raise ParameterError("trans must be a nonnegative K x K matrix")
        if not np.allclose(self.trans.sum(axis=1), 1.0, atol=1e-9):
            raise ParameterError("trans rows must sum to 1")
        if abs(self.init.sum() - 1.0) > 1e-9 or np.any(self.init < 0):
            raise ParameterError("init must be a probability vector")
        for k in range(K):
            try:
                np.linalg.cholesky(self.covs[k])
            except np.linalg.LinAlgError:
                raise ParameterError(f"covariance of state {k} is not positive definite")


@dataclass(frozen=True)
class PosteriorState:
    """Filtered state probabilities at step t."""

    pi: np.ndarray
    entropy: float
    t: int
    degenerate: bool = False


@dataclass(frozen=True)
class PosteriorPath:
    """Posteriors for a whole stream. Rows with missing frames are NaN."""

    pi: np.ndarray
    entropy: np.ndarray
    degenerate: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.entropy)

    def __getitem__(self, t) -> PosteriorState:
        return PosteriorState(self.pi[t], float(self.entropy[t]), int(t), bool(self.degenerate[t]))


class _TracingMonitor(ConvergenceMonitor):
    """Stops on relative log-likelihood improvement and keeps the full trace."""

    def __init__(self, tol, n_iter, verbose=False):
        super().__init__(tol, n_iter, verbose)
        self.trace = []

    def _reset(self):
        super()._reset()
        self.trace = []

    def report(self, log_prob):
        super().report(log_prob)
        self.trace.append(float(log_prob))

    @property
    def converged(self):
        if self.iter == self.n_iter:
            return True
        if len(self.history) < 2:
            return False
        prev, cur = self.history[-2], self.history[-1]
        return (cur - prev) < self.tol * abs(prev)


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    matrix = np.clip(np.asarray(matrix, dtype=float), 0.0, None)
    sums = matrix.sum(axis=-1, keepdims=True)
    uniform = np.full_like(matrix, 1.0 / matrix.shape[-1])
    return np.where(sums > 0, matrix / np.where(sums > 0, sums, 1.0), uniform)


def fit_hmm(
    frames,
    n_restarts: int = 10,
    max_iters: int = 100,
    seed: int = 0,
    tol: float = 1e-6,
    var_floor: float = 1e-6,
) -> HmmModel:
    """
    Baum-Welch with random restarts; keeps the restart with the highest
    training log-likelihood.

    Each restart seeds means by k-means with its own random state and starts
    from uniform transitions plus a small jitter.
    """
    X = np.asarray(frames, dtype=float)
    if X.ndim != 2:
        raise ParameterError("frames must be a 2-D array (T x d)")
    if n_restarts < 1:
        raise ParameterError("n_restarts must be >= 1")
    min_len = 10 * N_STATES * X.shape[1]
    if len(X) < min_len:
        raise ParameterError(f"need at least {min_len} frames to fit, got {len(X)}")
    if not np.all(np.isfinite(X)):
        raise InputError("frames passed to fit_hmm must be finite")

    best = None
    best_score = -np.inf

    for restart, child in enumerate(np.random.SeedSequence(seed).spawn(n_restarts)):
        rng = np.random.default_rng(child)

        hmm = GaussianHMM(
            n_components=N_STATES,
            covariance_type="full",
            min_covar=var_floor,
            covars_prior=0.0,
            n_iter=max_iters,
            tol=tol,
            init_params="mc",
            params="stmc",
            random_state=int(rng.integers(2**31 - 1)),
        )
        hmm.startprob_ = np.full(N_STATES, 1.0 / N_STATES)
        hmm.transmat_ = _normalize_rows(
            np.full((N_STATES, N_STATES), 1.0 / N_STATES)
            + rng.uniform(0.0, 0.1, (N_STATES, N_STATES))
        )
        hmm.monitor_ = _TracingMonitor(tol, max_iters)

        hmm.fit(X)
        score = hmm.score(X)
        logger.debug(
            "restart %d: log-likelihood %.3f after %d iterations",
            restart,
            score,
            hmm.monitor_.iter,
        )

        if score > best_score:
            best_score = score
            best = hmm

    model = HmmModel(
        trans=_normalize_rows(best.transmat_),
        means=np.array(best.means_, dtype=float),
        covs=np.array(best.covars_, dtype=float),
        init=_normalize_rows(best.startprob_),
        log_likelihood=float(best_score),
        em_trace=tuple(best.monitor_.trace),
    )
    logger.info("HMM fit on %d frames: log-likelihood %.3f", len(X), best_score)
    return model


def log_emissions(model: HmmModel, frames) -> np.ndarray:
    """Gaussian log-densities, shape (T, K). NaN rows stay NaN."""
    X = np.atleast_2d(np.asarray(frames, dtype=float))
    out = np.full((len(X), model.n_states), np.nan)
    valid = np.all(np.isfinite(X), axis=1)
    if valid.any():
        for k in range(model.n_states):
            out[valid, k] = multivariate_normal.logpdf(
                X[valid], mean=model.means[k], cov=model.covs[k], allow_singular=True
            )
    return out


def _posterior_from_log(log_post: np.ndarray, t: int) -> PosteriorState:
    norm = logsumexp(log_post)
    if not np.isfinite(norm):
        K = len(log_post)
        return PosteriorState(np.full(K, 1.0 / K), float(np.log(K)), t, degenerate=True)

    pi = np.exp(log_post - norm)
    pi = pi / pi.sum()
    return PosteriorState(pi, float(shannon_entropy(pi)), t)


def forward_filter_step(
    model: HmmModel, prev: PosteriorState | None, x_t, t: int | None = None
) -> PosteriorState:
    """
    One predict-then-update step.

    Math:
        `pi_t ∝ (pi_{t-1}' P) * N(x_t | mu_k, Sigma_k)`, evaluated in log
        space. With prev=None the prediction is the initial distribution.
        If every state has zero mass the result is uniform and flagged.
    """
    if prev is None:
        prior = model.init
        t = 0 if t is None else t
    else:
        prior = prev.pi @ model.trans
        t = prev.t + 1 if t is None else t

    with np.errstate(divide="ignore"):
        log_prior = np.log(prior)

    log_post = log_prior + log_emissions(model, x_t)[0]
    state = _posterior_from_log(log_post, t)
    if state.degenerate:
        logger.warning("filter degenerate at t=%d, reset to uniform", t)
    return state


def filter_sequence(model: HmmModel, frames, reset_mask=None) -> PosteriorPath:
    """
    Filter a whole stream.

    Rows with missing values get NaN posteriors; the next valid row (and any
    row flagged in reset_mask) restarts from the initial distribution.
    """
    X = np.asarray(frames, dtype=float)
    T, K = len(X), model.n_states
    log_em = log_emissions(model, X)

    with np.errstate(divide="ignore"):
        log_init = np.log(model.init)
        log_trans = np.log(model.trans)

    pi = np.full((T, K), np.nan)
    ent = np.full(T, np.nan)
    degenerate = np.zeros(T, dtype=bool)
    resets = np.zeros(T, dtype=bool) if reset_mask is None else np.asarray(reset_mask, bool)

    log_prev = None
    for t in range(T):
        if np.isnan(log_em[t, 0]):
            log_prev = None
            continue

        if log_prev is None or resets[t]:
            log_prior = log_init
        else:
            log_prior = logsumexp(log_prev[:, None] + log_trans, axis=0)

        state = _posterior_from_log(log_prior + log_em[t], t)
        if state.degenerate:
            logger.warning("filter degenerate at t=%d, reset to uniform", t)
        pi[t] = state.pi
        ent[t] = state.entropy
        degenerate[t] = state.degenerate
        with np.errstate(divide="ignore"):
            log_prev = np.log(state.pi)

    return PosteriorPath(pi=pi, entropy=ent, degenerate=degenerate)


def align_states(model: HmmModel, reference_means) -> tuple:
    """
    Match fitted states to reference regimes.

    Returns perm with perm[i] = regime index of fitted state i, chosen to
    minimise the total Euclidean distance between matched means.
    """
    ref = np.asarray(reference_means, dtype=float)
    cost = np.linalg.norm(model.means[:, None, :] - ref[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)

    perm = np.empty(model.n_states, dtype=int)
    perm[rows] = cols
    return tuple(int(p) for p in perm)


def reorder_states(model: HmmModel, perm) -> HmmModel:
    """Relabel states so that state index == regime index."""
    order = np.argsort(perm)
    return HmmModel(
        trans=model.trans[np.ix_(order, order)],
        means=model.means[order],
        covs=model.covs[order],
        init=model.init[order],
        log_likelihood=model.log_likelihood,
        em_trace=model.em_trace,
    )


def save_model(model: HmmModel, path):
    payload = {
        "n_states": model.n_states,
        "trans": model.trans.tolist(),
        "means": model.means.tolist(),
        "covs": model.covs.tolist(),
        "init": model.init.tolist(),
        "log_likelihood": float(model.log_likelihood),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(payload, f, sort_keys=False)


def load_model(path) -> HmmModel:
    with open(path) as f:
        payload = yaml.safe_load(f)

    model = HmmModel(
        trans=np.array(payload["trans"], dtype=float),
        means=np.array(payload["means"], dtype=float),
        covs=np.array(payload["covs"], dtype=float),
        init=np.array(payload["init"], dtype=float),
        log_likelihood=float(payload.get("log_likelihood", float("nan"))),
    )
    model.validate()
    return model
