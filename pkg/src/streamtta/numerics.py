"""Dense symmetric-matrix and spectral primitives.

Everything here runs in float64. Matrices are small (channel counts, at
most ~128), so the symmetric eigensolver favors robustness over speed.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateInputError, NumericalError

SYMMETRY_ATOL = 1e-12


def check_symmetric(m: np.ndarray, atol: float = SYMMETRY_ATOL) -> np.ndarray:
    """Validate that `m` is a finite square symmetric matrix and return it as float64."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("matrix contains non-finite entries")
    scale = max(1.0, float(np.abs(m).max()))
    if not np.allclose(m, m.T, rtol=0.0, atol=atol * scale):
        raise ContractError("matrix is not symmetric within tolerance")
    return m


def covariance(data: np.ndarray) -> np.ndarray:
    """Uncentered channel covariance (1/T) X X^T of channel-major data X (C x T)."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"expected a 2-D channels-by-time array, got shape {x.shape}")
    n_samples = x.shape[1]
    if n_samples < 2:
        raise DegenerateInputError("covariance needs at least 2 time samples")
    if not np.all(np.isfinite(x)):
        raise NumericalError("trial data contains non-finite entries")
    c = (x @ x.T) / n_samples
    return 0.5 * (c + c.T)


def jacobi_eigh(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues ascending and
    eigenvectors in columns, so m == V @ diag(w) @ V.T up to round-off.
    """
    a = check_symmetric(m).copy()
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v

    norm = np.sqrt(np.sum(a * a))
    if norm == 0.0:
        return np.zeros(n), v

    converged = False
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * norm:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol * norm / n:
                    continue
                # stable rotation angle (Golub & Van Loan)
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) if theta != 0 else 1.0
                t = t / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                vcol_p = v[:, p].copy()
                vcol_q = v[:, q].copy()
                v[:, p] = c * vcol_p - s * vcol_q
                v[:, q] = s * vcol_p + c * vcol_q
    else:
        converged = False
    if not converged:
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off > tol * norm * 10:
            raise NumericalError(f"Jacobi eigensolve did not converge in {max_sweeps} sweeps")

    eigvals = a.diagonal().copy()
    order = np.argsort(eigvals)
    return eigvals[order], v[:, order]


def default_eps(m: np.ndarray) -> float:
    """Regularizer that keeps whitening finite for rank-deficient covariances."""
    m = np.asarray(m, dtype=np.float64)
    return 1e-8 * float(np.trace(m)) / m.shape[0]


def inv_sqrt_psd(m: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Inverse matrix square root V diag((lam+eps)^-1/2) V^T of a symmetric PSD matrix."""
    m = check_symmetric(m)
    if eps < 0:
        raise ContractError("eps must be non-negative")
    eigvals, eigvecs = jacobi_eigh(m)
    shifted = eigvals + eps
    if np.any(shifted <= 0):
        raise NumericalError(
            "matrix has non-positive eigenvalues after regularization; "
            f"min eigenvalue {eigvals.min():.3e}, eps {eps:.3e}"
        )
    inv_root = eigvecs @ np.diag(shifted ** -0.5) @ eigvecs.T
    return 0.5 * (inv_root + inv_root.T)


def analytic_signal(x: np.ndarray) -> np.ndarray:
    """Complex analytic signal of a real series: real part is the input, spectrum is one-sided.

    The real part is returned bit-identical to the input; only the quadrature
    component comes from the FFT, so negative-frequency leakage stays at
    round-off level. Works for arbitrary lengths.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError(f"expected a 1-D series, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise DegenerateInputError("analytic signal needs at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise NumericalError("series contains non-finite entries")
    spectrum = np.fft.fft(x)
    gain = np.zeros(n)
    gain[0] = 1.0
    if n % 2 == 0:
        gain[n // 2] = 1.0
        gain[1 : n // 2] = 2.0
    else:
        gain[1 : (n + 1) // 2] = 2.0
    quadrature = np.fft.ifft(spectrum * gain).imag
    return x + 1j * quadrature
