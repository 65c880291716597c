"""Online covariance alignment for the streaming target domain.

Keeps a running mean of trial covariances and whitens each incoming trial by
the inverse square root of that mean, so the mean covariance of whitened
trials converges to the identity.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NotInitializedError
from .numerics import covariance, default_eps, inv_sqrt_psd
from .transforms import Trial


class EaState:
    """Running alignment state: trial count, mean covariance, cached whitener.

    Single-writer: the stream loop owns updates. Snapshots are safe to read
    from anywhere.
    """

    def __init__(self):
        self.count: int = 0
        self.mean_cov: np.ndarray | None = None
        self.whitener: np.ndarray | None = None

    @property
    def dim(self) -> int | None:
        return None if self.mean_cov is None else self.mean_cov.shape[0]

    def copy(self) -> "EaState":
        out = EaState()
        out.count = self.count
        out.mean_cov = None if self.mean_cov is None else self.mean_cov.copy()
        out.whitener = None if self.whitener is None else self.whitener.copy()
        return out


def ea_update(state: EaState, trial: Trial) -> EaState:
    """Fold one trial's covariance into the running mean and refresh the whitener."""
    cov = covariance(trial.data)
    new = state.copy()
    if new.mean_cov is None:
        new.mean_cov = cov
    else:
        if cov.shape != new.mean_cov.shape:
            raise DimensionError(
                f"trial has {cov.shape[0]} channels, state expects {new.mean_cov.shape[0]}"
            )
        new.mean_cov = (new.count * new.mean_cov + cov) / (new.count + 1)
    new.count += 1
    new.whitener = inv_sqrt_psd(new.mean_cov, eps=default_eps(new.mean_cov))
    return new


def ea_align(state: EaState, trial: Trial) -> Trial:
    """Whiten a trial with the current reference; shape is preserved."""
    if state.count < 1 or state.whitener is None:
        raise NotInitializedError("alignment state has seen no trials")
    if trial.channels != state.whitener.shape[0]:
        raise DimensionError(
            f"trial has {trial.channels} channels, state expects {state.whitener.shape[0]}"
        )
    return Trial(state.whitener @ trial.data, trial.rate_hz)


def batch_ea_state(trials: list[Trial]) -> EaState:
    """Alignment state computed from a full batch at once (offline reference)."""
    state = EaState()
    for trial in trials:
        state = ea_update(state, trial)
    return state
