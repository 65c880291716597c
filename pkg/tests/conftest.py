import numpy as np
import pytest

from streamtta.rank import RankTrainConfig, gen_synthetic, train_mapping


@pytest.fixture(scope="session")
def mapping_k12():
    """One trained mapping network at K=12, shared across the whole session."""
    samples = gen_synthetic(12000, 12, seed=0)
    return train_mapping(samples, RankTrainConfig(epochs=100, patience=10, seed=0))


@pytest.fixture(scope="session")
def mapping_k10():
    """Trained mapping network at K=10 (the feature-mask branch count)."""
    samples = gen_synthetic(12000, 10, seed=0)
    return train_mapping(samples, RankTrainConfig(epochs=100, patience=10, seed=0))


def finite_difference(fn, arr, eps=1e-6):
    """Central finite differences of scalar fn() with respect to arr, in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        f_plus = fn()
        arr[idx] = orig - eps
        f_minus = fn()
        arr[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return grad
