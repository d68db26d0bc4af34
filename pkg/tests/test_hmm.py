"""
HMM tests: the online filter against brute-force path enumeration, the
degenerate/missing-data behaviour, state alignment and Baum-Welch fitting.
"""

from dataclasses import replace

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from src.config.load import dgp_params_from_config, load_config
from src.data.dgp import simulate_run
from src.errors import InputError, ParameterError
from src.models.hmm import (
    HmmModel,
    align_states,
    filter_sequence,
    fit_hmm,
    forward_filter_step,
    load_model,
    reorder_states,
    save_model,
)


@pytest.fixture
def toy_model():
    """1-D model with a dense transition matrix so every path has mass."""
    return HmmModel(
        trans=np.array([[0.8, 0.15, 0.05], [0.1, 0.7, 0.2], [0.3, 0.1, 0.6]]),
        means=np.array([[0.0], [1.5], [4.0]]),
        covs=np.array([[[1.0]], [[0.5]], [[2.0]]]),
        init=np.array([0.5, 0.3, 0.2]),
    )


def _brute_force_filter(model, x):
    """P(z_{n-1} | x_0..x_{n-1}) by summing over every state path."""
    n = len(x)
    paths = np.indices((3,) * n).reshape(n, -1).T
    sd = np.sqrt(model.covs[:, 0, 0])
    log_em = norm.logpdf(x[:, None], loc=model.means[:, 0], scale=sd)  # (n, 3)

    logp = np.log(model.init)[paths[:, 0]] + log_em[0, paths[:, 0]]
    for i in range(1, n):
        logp += np.log(model.trans)[paths[:, i - 1], paths[:, i]]
        logp += log_em[i, paths[:, i]]

    joint = np.array([logsumexp(logp[paths[:, -1] == k]) for k in range(3)])
    return np.exp(joint - logsumexp(joint))


def test_filter_matches_path_enumeration(toy_model):
    rng = np.random.default_rng(5)
    x = rng.normal(1.5, 2.0, size=8)

    path = filter_sequence(toy_model, x[:, None])
    for n in range(1, len(x) + 1):
        expected = _brute_force_filter(toy_model, x[:n])
        assert np.allclose(path.pi[n - 1], expected, atol=1e-10), f"mismatch at step {n - 1}"


def test_online_step_matches_batch(toy_model):
    x = np.array([0.2, 3.9, 1.1, -0.5, 2.2])[:, None]
    path = filter_sequence(toy_model, x)

    state = None
    for t in range(len(x)):
        state = forward_filter_step(toy_model, state, x[t])
        assert state.t == t
        assert np.allclose(state.pi, path.pi[t])
        assert state.entropy == pytest.approx(path.entropy[t])


def test_absorbing_identity_chain(toy_model):
    model = replace(toy_model, trans=np.eye(3), init=np.array([1.0, 0.0, 0.0]))
    state = None
    for x in (0.0, 3.0, 5.0):
        state = forward_filter_step(model, state, np.array([x]))
        assert np.array_equal(state.pi, [1.0, 0.0, 0.0])


def test_degenerate_step_resets_to_uniform(toy_model):
    state = forward_filter_step(toy_model, None, np.array([1e200]))

    assert state.degenerate
    assert np.allclose(state.pi, 1.0 / 3.0)
    assert state.entropy == pytest.approx(np.log(3.0))


def test_missing_rows_restart_from_init(toy_model):
    x = np.array([0.1, 4.2, np.nan, 3.8, 0.3])[:, None]
    path = filter_sequence(toy_model, x)

    assert np.all(np.isnan(path.pi[2]))
    # the row after the gap is filtered as if it were the first
    fresh = forward_filter_step(toy_model, None, x[3])
    assert np.allclose(path.pi[3], fresh.pi)


def test_reset_mask_restarts(toy_model):
    x = np.array([0.1, 4.2, 3.8])[:, None]
    path = filter_sequence(toy_model, x, reset_mask=[False, False, True])
    fresh = forward_filter_step(toy_model, None, x[2])
    assert np.allclose(path.pi[2], fresh.pi)


def test_align_and_reorder(toy_model):
    shuffled = replace(toy_model, means=np.array([[10.0], [0.0], [5.0]]))
    perm = align_states(shuffled, [[0.0], [5.0], [10.0]])
    assert perm == (2, 0, 1)

    ordered = reorder_states(shuffled, perm)
    assert np.array_equal(ordered.means[:, 0], [0.0, 5.0, 10.0])
    # transition rows follow their states
    assert np.array_equal(ordered.trans[0], shuffled.trans[1][[1, 2, 0]])


def _separated_params():
    params = dgp_params_from_config(load_config("src/config/default.yaml"))
    mu = np.array(
        [
            [1.0, 50.0, 0.0, 1.0],
            [3.0, 40.0, 0.0, 2.0],
            [8.0, 15.0, 0.0, 4.0],
        ]
    )
    return replace(params, mu=mu, alpha=0.0, T=3000)


def test_fit_recovers_separated_regimes():
    """With no drift and distinct means, EM should find the regimes."""
    params = _separated_params()
    run = simulate_run(params, 11)

    model = fit_hmm(run.frames, n_restarts=2, max_iters=50, seed=0)
    model = reorder_states(model, align_states(model, params.mu))

    assert np.allclose(model.means, params.mu, atol=0.3), "means should be recovered"
    assert np.allclose(model.trans.sum(axis=1), 1.0)

    trace = np.array(model.em_trace)
    assert len(trace) >= 2
    assert np.all(np.diff(trace) >= -1e-6 * np.abs(trace[:-1])), "EM log-likelihood went down"

    post = filter_sequence(model, run.frames)
    accuracy = np.mean(np.argmax(post.pi, axis=1) == run.labels)
    assert accuracy > 0.95


def test_fit_input_checks():
    with pytest.raises(ParameterError):
        fit_hmm(np.zeros((50, 4)))
    with pytest.raises(ParameterError):
        fit_hmm(np.random.default_rng(0).normal(size=(200, 4)), n_restarts=0)

    bad = np.random.default_rng(0).normal(size=(200, 4))
    bad[7, 1] = np.nan
    with pytest.raises(InputError):
        fit_hmm(bad)


def test_model_save_load(toy_model, tmp_path):
    path = tmp_path / "model.yaml"
    save_model(toy_model, path)
    loaded = load_model(path)

    assert np.allclose(loaded.trans, toy_model.trans)
    assert np.allclose(loaded.means, toy_model.means)
    assert np.allclose(loaded.covs, toy_model.covs)
