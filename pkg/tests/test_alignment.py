import numpy as np
import pytest

from streamtta.alignment import EaState, batch_ea_state, ea_align, ea_update
from streamtta.errors import DimensionError, NotInitializedError
from streamtta.numerics import covariance
from streamtta.transforms import Trial


def random_trials(n, channels=4, samples=64, seed=0):
    rng = np.random.default_rng(seed)
    return [Trial(rng.standard_normal((channels, samples)), rate_hz=32.0) for _ in range(n)]


def test_first_trial_sets_mean():
    trial = random_trials(1)[0]
    state = ea_update(EaState(), trial)
    assert state.count == 1
    assert np.allclose(state.mean_cov, covariance(trial.data), atol=1e-14)


def test_two_trials_arithmetic_mean():
    t1, t2 = random_trials(2, seed=1)
    state = ea_update(ea_update(EaState(), t1), t2)
    expected = 0.5 * (covariance(t1.data) + covariance(t2.data))
    assert np.allclose(state.mean_cov, expected, atol=1e-12)


def test_fifty_trials_match_batch_oracle():
    trials = random_trials(50, seed=2)
    state = EaState()
    for t in trials:
        state = ea_update(state, t)
    batch_mean = np.mean([covariance(t.data) for t in trials], axis=0)
    assert np.allclose(state.mean_cov, batch_mean, atol=1e-10)


def test_identity_whitener_is_noop():
    trial = random_trials(1, seed=3)[0]
    state = EaState()
    state.count = 1
    state.mean_cov = np.eye(trial.channels)
    state.whitener = np.eye(trial.channels)
    aligned = ea_align(state, trial)
    assert np.array_equal(aligned.data, trial.data)


def test_single_trial_self_alignment_whitens():
    trial = random_trials(1, seed=4)[0]
    state = ea_update(EaState(), trial)
    aligned = ea_align(state, trial)
    assert np.allclose(covariance(aligned.data), np.eye(trial.channels), atol=1e-8)


def test_mean_covariance_of_aligned_set_is_identity():
    trials = random_trials(40, seed=5)
    state = batch_ea_state(trials)
    covs = [covariance(ea_align(state, t).data) for t in trials]
    mean_cov = np.mean(covs, axis=0)
    err = np.sqrt(np.sum((mean_cov - np.eye(trials[0].channels)) ** 2))
    assert err < 1e-6


def test_update_order_insensitive():
    trials = random_trials(12, seed=6)
    fwd = batch_ea_state(trials)
    rev = batch_ea_state(trials[::-1])
    assert np.allclose(fwd.mean_cov, rev.mean_cov, atol=1e-10)


def test_alignment_is_linear():
    trials = random_trials(3, seed=7)
    state = batch_ea_state(trials)
    t = trials[0]
    scaled = Trial(2.5 * t.data, t.rate_hz)
    assert np.allclose(ea_align(state, scaled).data, 2.5 * ea_align(state, t).data, atol=1e-12)


def test_empty_state_align_raises():
    with pytest.raises(NotInitializedError):
        ea_align(EaState(), random_trials(1)[0])


def test_channel_mismatch_raises():
    state = batch_ea_state(random_trials(2, channels=4))
    with pytest.raises(DimensionError):
        ea_update(state, random_trials(1, channels=5)[0])
    with pytest.raises(DimensionError):
        ea_align(state, random_trials(1, channels=5)[0])


def test_update_does_not_mutate_input_state():
    trials = random_trials(2, seed=8)
    state1 = ea_update(EaState(), trials[0])
    snapshot = state1.mean_cov.copy()
    ea_update(state1, trials[1])
    assert np.array_equal(state1.mean_cov, snapshot)
    assert state1.count == 1
