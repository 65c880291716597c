import numpy as np
import pytest

from streamtta.aggregate import PredictionSet, classify, regress
from streamtta.errors import ContractError, NumericalError
from streamtta.util import stable_softmax


class TestClassify:
    def test_single_branch_argmax_tau_invariant(self):
        logits = np.array([[0.3, 2.0, -1.0]])
        for tau in (0.25, 0.5, 1.0):
            pred, fused = classify(PredictionSet(weights=[1.0], tau=tau, logits=logits))
            assert pred == 1
            assert abs(fused.sum() - 1.0) < 1e-12

    def test_symmetric_tie_breaks_low(self):
        logits = np.array([[2.0, 0.0], [0.0, 2.0]])
        pred, fused = classify(PredictionSet(weights=[0.5, 0.5], tau=1.0, logits=logits))
        assert np.allclose(fused, [0.5, 0.5], atol=1e-12)
        assert pred == 0

    def test_weighted_sharpened_hand_computed(self):
        # two branches, two classes, weights 0.9/0.1, temperature one half
        logits = np.array([[2.0, 0.0], [0.0, 2.0]])
        ps = PredictionSet(weights=[0.9, 0.1], tau=0.5, logits=logits)
        pred, fused = classify(ps)
        # hand evaluation: sharpened branch softmax is exp(4)/(exp(4)+1) on its max
        p = np.exp(4.0) / (np.exp(4.0) + 1.0)
        expected = np.array([0.9 * p + 0.1 * (1 - p), 0.9 * (1 - p) + 0.1 * p])
        assert np.allclose(fused, expected, atol=1e-9)
        assert pred == 0

    def test_uniform_tau_one_equals_mean_of_softmaxes(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((5, 3))
        ps = PredictionSet(weights=np.full(5, 0.2), tau=1.0, logits=logits)
        _, fused = classify(ps)
        assert np.allclose(fused, stable_softmax(logits, axis=1).mean(axis=0), atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((6, 4))
        w = rng.dirichlet(np.ones(6))
        perm = rng.permutation(6)
        a = classify(PredictionSet(weights=w, tau=0.5, logits=logits))
        b = classify(PredictionSet(weights=w[perm], tau=0.5, logits=logits[perm]))
        assert a[0] == b[0]
        assert np.allclose(a[1], b[1], atol=1e-12)

    def test_sharpening_monotone_when_branches_agree(self):
        rng = np.random.default_rng(2)
        base = rng.standard_normal(3)
        base[0] += 3.0  # all branches agree on class 0
        logits = np.stack([base + 0.1 * rng.standard_normal(3) for _ in range(4)])
        w = np.full(4, 0.25)
        last = 0.0
        for tau in (1.0, 0.5, 0.25):
            _, fused = classify(PredictionSet(weights=w, tau=tau, logits=logits))
            assert fused[0] >= last - 1e-12
            last = fused[0]

    def test_overflow_safe(self):
        logits = np.array([[1000.0, 0.0], [997.0, 1.0]])
        _, fused = classify(PredictionSet(weights=[0.6, 0.4], tau=0.5, logits=logits))
        assert np.all(np.isfinite(fused))

    def test_non_finite_rejected(self):
        with pytest.raises(NumericalError):
            PredictionSet(weights=[1.0], tau=0.5, logits=np.array([[np.inf, 0.0]]))

    def test_needs_two_classes(self):
        with pytest.raises(ContractError):
            classify(PredictionSet(weights=[1.0], tau=0.5, logits=np.array([[1.0]])))


class TestRegress:
    def test_single_branch(self):
        ps = PredictionSet(weights=[1.0], tau=0.5, scalars=[0.7])
        assert regress(ps, np.array([3.0])) == 0.7

    def test_top_half_mean(self):
        ps = PredictionSet(weights=np.full(4, 0.25), tau=0.5,
                           scalars=[0.1, 0.2, 0.9, 0.8])
        scores = np.array([0.0, 0.1, 3.0, 2.0])
        assert regress(ps, scores) == pytest.approx(0.85)

    def test_odd_k_takes_ceiling(self):
        ps = PredictionSet(weights=np.full(5, 0.2), tau=0.5,
                           scalars=[1.0, 2.0, 3.0, 4.0, 5.0])
        scores = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
        assert regress(ps, scores) == pytest.approx((1.0 + 2.0 + 3.0) / 3.0)

    def test_score_ties_break_to_low_branch_index(self):
        ps = PredictionSet(weights=np.full(4, 0.25), tau=0.5,
                           scalars=[10.0, 20.0, 30.0, 40.0])
        scores = np.zeros(4)
        assert regress(ps, scores) == pytest.approx(15.0)

    def test_identical_values_exact(self):
        ps = PredictionSet(weights=np.full(7, 1 / 7), tau=0.5, scalars=np.full(7, 0.4321))
        assert regress(ps, np.arange(7.0)) == 0.4321

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        scalars = rng.standard_normal(6)
        scores = rng.standard_normal(6)
        w = rng.dirichlet(np.ones(6))
        perm = rng.permutation(6)
        a = regress(PredictionSet(weights=w, tau=0.5, scalars=scalars), scores)
        b = regress(PredictionSet(weights=w[perm], tau=0.5, scalars=scalars[perm]), scores[perm])
        assert a == pytest.approx(b, abs=1e-12)


class TestPredictionSet:
    def test_validation(self):
        with pytest.raises(ContractError):
            PredictionSet(weights=[0.5, 0.5], tau=0.0, logits=np.zeros((2, 2)))
        with pytest.raises(ContractError):
            PredictionSet(weights=[0.5, 0.5], tau=0.5)
        with pytest.raises(ContractError):
            PredictionSet(weights=[0.7, 0.7], tau=0.5, logits=np.zeros((2, 2)))
        with pytest.raises(ContractError):
            PredictionSet(weights=[0.5, 0.5], tau=0.5, logits=np.zeros((3, 2)))
