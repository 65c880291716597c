import numpy as np
import pytest
from scipy import linalg as sla

from streamtta.errors import ContractError, DegenerateInputError
from streamtta.numerics import (
    analytic_signal,
    covariance,
    default_eps,
    inv_sqrt_psd,
    jacobi_eigh,
)


def brute_force_covariance(x):
    """Independent double-loop oracle for (1/T) X X^T."""
    c, t = x.shape
    out = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            acc = 0.0
            for s in range(t):
                acc += x[i, s] * x[j, s]
            out[i, j] = acc / t
    return out


class TestCovariance:
    def test_zero_single_channel(self):
        out = covariance(np.zeros((1, 8)))
        assert out.shape == (1, 1)
        assert out[0, 0] == 0.0

    def test_identical_rows_rank_one(self):
        row = np.array([1.0, -1.0, 1.0, -1.0])
        out = covariance(np.stack([row, row]))
        assert np.allclose(out, np.ones((2, 2)))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 256))
        assert np.allclose(covariance(x), brute_force_covariance(x), atol=1e-12)

    def test_rejects_single_sample(self):
        with pytest.raises(DegenerateInputError):
            covariance(np.zeros((3, 1)))

    def test_psd(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.standard_normal((5, 40))
            eigvals, _ = jacobi_eigh(covariance(x))
            assert eigvals.min() >= -1e-10


class TestJacobi:
    def test_reconstruction_matches_numpy(self):
        rng = np.random.default_rng(2)
        for n in (2, 3, 6, 17):
            a = rng.standard_normal((n, n))
            m = a @ a.T
            w, v = jacobi_eigh(m)
            assert np.allclose(v @ np.diag(w) @ v.T, m, atol=1e-10)
            ref = np.linalg.eigvalsh(m)
            assert np.allclose(np.sort(w), ref, atol=1e-9 * max(1, abs(ref).max()))

    def test_orthonormal_vectors(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((8, 8))
        _, v = jacobi_eigh(a + a.T)
        assert np.allclose(v.T @ v, np.eye(8), atol=1e-10)

    def test_rejects_asymmetric(self):
        with pytest.raises(ContractError):
            jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestInvSqrtPsd:
    def test_identity(self):
        assert np.allclose(inv_sqrt_psd(np.eye(3), eps=0.0), np.eye(3), atol=1e-12)

    def test_diagonal_closed_form(self):
        out = inv_sqrt_psd(np.diag([4.0, 9.0]), eps=0.0)
        assert np.allclose(out, np.diag([0.5, 1.0 / 3.0]), atol=1e-12)

    def test_defining_identity_random_spd(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((6, 6))
        m = a @ a.T + 0.5 * np.eye(6)
        w = inv_sqrt_psd(m, eps=0.0)
        assert np.allclose(w @ m @ w, np.eye(6), atol=1e-8)
        # cross-check against scipy's matrix square root
        ref = np.real(sla.inv(sla.sqrtm(m)))
        assert np.allclose(w, ref, atol=1e-8)

    def test_regularizer_keeps_rank_deficient_finite(self):
        m = np.diag([1.0, 0.0])
        out = inv_sqrt_psd(m, eps=default_eps(m))
        assert np.all(np.isfinite(out))

    def test_rejects_asymmetric(self):
        with pytest.raises(ContractError):
            inv_sqrt_psd(np.array([[1.0, 0.5], [0.2, 1.0]]), eps=0.0)


class TestAnalyticSignal:
    def test_cosine_quadrature_is_sine(self):
        n, cycles = 256, 8
        t = np.arange(n) / n
        z = analytic_signal(np.cos(2 * np.pi * cycles * t))
        assert np.allclose(z.imag, np.sin(2 * np.pi * cycles * t), atol=1e-9)

    def test_constant_has_no_quadrature(self):
        z = analytic_signal(np.full(100, 3.7))
        assert np.allclose(z.imag, 0.0, atol=1e-12)

    def test_negative_frequencies_vanish(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(512)
        spec = np.fft.fft(analytic_signal(x))
        assert np.abs(spec[257:]).max() <= 1e-9 * np.abs(spec).max()

    def test_real_part_exact(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal(300)
        z = analytic_signal(x)
        assert np.array_equal(z.real, x)

    def test_arbitrary_lengths(self):
        rng = np.random.default_rng(7)
        for n in (5, 97, 128, 243):  # primes and odd lengths hit the non-radix-2 paths
            x = rng.standard_normal(n)
            z = analytic_signal(x)
            spec = np.fft.fft(z)
            neg = spec[(n + 1) // 2 + (1 if n % 2 == 0 else 0):]
            assert np.abs(neg).max() <= 1e-9 * max(np.abs(spec).max(), 1.0)

    def test_rejects_short(self):
        with pytest.raises(DegenerateInputError):
            analytic_signal(np.array([1.0]))
