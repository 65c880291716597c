"""Executable checks of the variance story behind branch aggregation.

Given per-branch prediction variances, a branch correlation matrix, and
aggregation weights, these operations compute the exact variance of the
weighted ensemble, the worst-case bounds under homogeneous and bounded
heterogeneous branch variance, the effective branch count, and the
sufficient condition under which the ensemble beats a single stochastic
forward pass. A Monte-Carlo estimator turns a live pipeline into empirical
branch statistics so the same checks run end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError, NumericalError
from .numerics import check_symmetric, jacobi_eigh
from .rank import check_weights


@dataclass
class BranchStats:
    """Branch variance/correlation structure for the ensemble variance checks.

    sigma2: per-branch prediction variances. corr: branch correlation matrix
    (unit diagonal, PSD). w: aggregation weights on the simplex. v0: variance
    of a single random-branch prediction. kappa: bound factor with
    max(sigma2) <= kappa * v0.
    """

    sigma2: np.ndarray
    corr: np.ndarray
    w: np.ndarray
    v0: float
    kappa: float

    def __post_init__(self):
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        self.w = check_weights(self.w)
        k = self.sigma2.size
        if self.w.size != k:
            raise ContractError("weights and variances disagree on K")
        if np.any(self.sigma2 < 0) or not np.all(np.isfinite(self.sigma2)):
            raise ContractError("branch variances must be finite and non-negative")
        self.corr = check_symmetric(self.corr)
        if self.corr.shape != (k, k):
            raise ContractError("correlation matrix shape does not match K")
        if not np.allclose(np.diag(self.corr), 1.0, atol=1e-9):
            raise ContractError("correlation matrix must have unit diagonal")
        if np.any(np.abs(self.corr) > 1.0 + 1e-9):
            raise ContractError("correlations must lie in [-1, 1]")
        eigvals, _ = jacobi_eigh(self.corr)
        if eigvals.min() < -1e-8:
            raise ContractError(f"correlation matrix not PSD (min eig {eigvals.min():.3e})")
        if not (self.kappa >= 1.0):
            raise ContractError("kappa must be at least 1")
        if not (self.v0 > 0):
            raise ContractError("single-shot variance must be positive")
        if self.sigma2.max() > self.kappa * self.v0 * (1.0 + 1e-9):
            raise ContractError("worst branch variance exceeds kappa * v0")

    @property
    def k(self) -> int:
        return self.sigma2.size

    @property
    def rho_max(self) -> float:
        if self.k < 2:
            return 0.0
        off = self.corr[~np.eye(self.k, dtype=bool)]
        return float(np.abs(off).max())


def var_decompose(stats: BranchStats) -> float:
    """Exact ensemble variance: diagonal weight-squared term plus correlation cross terms."""
    s = stats.sigma2
    sd = np.sqrt(s)
    total = float(np.sum(stats.w ** 2 * s))
    for i in range(stats.k):
        for j in range(stats.k):
            if i != j:
                total += stats.w[i] * stats.w[j] * stats.corr[i, j] * sd[i] * sd[j]
    return total


def homo_bound(sigma2: float, rho_max: float, w: np.ndarray) -> float:
    """Upper bound on ensemble variance when every branch shares variance sigma2."""
    if not (sigma2 > 0):
        raise ContractError("sigma2 must be positive")
    if not (0.0 <= rho_max <= 1.0):
        raise ContractError("rho_max must lie in [0, 1]")
    w = check_weights(w)
    return float(sigma2 * (rho_max + (1.0 - rho_max) * np.sum(w ** 2)))


def k_eff(w: np.ndarray) -> float:
    """Effective number of branches 1 / sum(w^2); K for uniform weights, 1 for one-hot."""
    w = check_weights(w)
    return float(1.0 / np.sum(w ** 2))


@dataclass
class HeteroCheck:
    bound: float
    condition_met: bool | None   # None when rho_max >= 1/kappa (condition inapplicable)
    reduced: bool
    rho_max: float
    k_eff: float
    variance: float


def hetero_check(stats: BranchStats) -> HeteroCheck:
    """Bound, sufficient condition, and realized reduction under heterogeneous variance."""
    rho = stats.rho_max
    keff = k_eff(stats.w)
    bound = float(stats.kappa * stats.v0 * (rho + (1.0 - rho) * np.sum(stats.w ** 2)))
    variance = var_decompose(stats)
    reduced = bool(variance < stats.v0)
    if rho >= 1.0 / stats.kappa:
        condition_met = None
    else:
        threshold = stats.kappa * (1.0 - rho) / (1.0 - stats.kappa * rho)
        condition_met = bool(keff > threshold)
    return HeteroCheck(bound=bound, condition_met=condition_met, reduced=reduced,
                       rho_max=rho, k_eff=keff, variance=variance)


def random_branch_stats(rng: np.random.Generator, k_min: int = 2, k_max: int = 8) -> BranchStats:
    """Random valid branch statistics for the randomized sweeps.

    Correlations come from a random-factor construction (A A^T, normalized)
    so the matrix is PSD by construction.
    """
    k = int(rng.integers(k_min, k_max + 1))
    rank = int(rng.integers(1, k + 1))
    a = rng.standard_normal((k, rank + 1))
    cov = a @ a.T + 1e-6 * np.eye(k)
    d = np.sqrt(np.diag(cov))
    corr = cov / np.outer(d, d)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    sigma2 = rng.uniform(0.1, 2.0, k)
    kappa = float(rng.uniform(1.0, 3.0))
    v0 = float(sigma2.max() / kappa * rng.uniform(1.0, 2.0))
    raw = rng.uniform(0.05, 1.0, k)
    w = raw / raw.sum()
    return BranchStats(sigma2=sigma2, corr=corr, w=w, v0=v0, kappa=kappa)


@dataclass
class EmpiricalBranchStats:
    """Monte-Carlo estimates of the branch statistics of a live pipeline."""

    mu: np.ndarray
    sigma2: np.ndarray
    corr: np.ndarray
    v0: float
    degenerate: bool
    draws: int

    def to_branch_stats(self, w: np.ndarray, kappa: float | None = None) -> BranchStats:
        if self.degenerate:
            raise DegenerateInputError("degenerate (zero-variance) statistics")
        kap = kappa if kappa is not None else max(1.0, float(self.sigma2.max() / self.v0))
        return BranchStats(sigma2=self.sigma2, corr=self.corr, w=w, v0=self.v0, kappa=kap)


def mc_branch_variance(predict, k_branches: int, n_draws: int, seed: int = 0) -> EmpiricalBranchStats:
    """Estimate per-branch variances/correlations and single-shot variance by sampling.

    `predict(k, rng)` must return the scalar prediction of branch `k` under
    fresh randomness drawn from `rng`. Each draw evaluates every branch with
    independent randomness; the single-shot estimate additionally picks a
    random branch per draw, matching a single stochastic forward pass.
    """
    if k_branches < 1:
        raise ContractError("need at least one branch")
    if n_draws < 2:
        raise ContractError("need at least two draws to estimate variance")
    root = np.random.SeedSequence(seed)
    branch_values = np.empty((n_draws, k_branches))
    single_values = np.empty(n_draws)
    picker = np.random.default_rng(root.spawn(1)[0])
    for i in range(n_draws):
        children = root.spawn(k_branches + 1)
        for k in range(k_branches):
            branch_values[i, k] = predict(k, np.random.default_rng(children[k]))
        pick = int(picker.integers(0, k_branches))
        single_values[i] = predict(pick, np.random.default_rng(children[k_branches]))
    if not np.all(np.isfinite(branch_values)) or not np.all(np.isfinite(single_values)):
        raise NumericalError("pipeline produced non-finite predictions")
    mu = branch_values.mean(axis=0)
    sigma2 = branch_values.var(axis=0)
    v0 = float(single_values.var())
    scale = max(float(np.abs(branch_values).max()) ** 2, 1e-30)
    degenerate = v0 <= 1e-14 * scale
    sd = np.sqrt(sigma2)
    corr = np.eye(k_branches)
    centered = branch_values - mu
    for i in range(k_branches):
        for j in range(i + 1, k_branches):
            if sd[i] > 0 and sd[j] > 0:
                c = float(np.mean(centered[:, i] * centered[:, j]) / (sd[i] * sd[j]))
                corr[i, j] = corr[j, i] = float(np.clip(c, -1.0, 1.0))
    return EmpiricalBranchStats(mu=mu, sigma2=sigma2, corr=corr, v0=v0,
                                degenerate=degenerate, draws=n_draws)


def sweep_report(n_sweeps: int = 10000, seed: int = 0) -> dict:
    """Randomized verification sweeps; returns a JSON-ready summary.

    Checks, over random valid branch statistics: the homogeneous bound
    dominates the exact variance, the heterogeneous bound dominates it,
    and the sufficient condition never fires without an actual reduction.
    """
    rng = np.random.default_rng(seed)
    bound_violations = 0
    condition_counterexamples = 0
    condition_fired = 0
    homo_violations = 0
    for _ in range(n_sweeps):
        stats = random_branch_stats(rng)
        variance = var_decompose(stats)
        check = hetero_check(stats)
        if check.bound < variance - 1e-9 * max(1.0, abs(variance)):
            bound_violations += 1
        if check.condition_met:
            condition_fired += 1
            if not check.reduced:
                condition_counterexamples += 1
        # homogeneous check: force equal variances at this rho_max
        homo_sigma2 = float(stats.sigma2.max())
        homo = BranchStats(
            sigma2=np.full(stats.k, homo_sigma2),
            corr=stats.corr,
            w=stats.w,
            v0=homo_sigma2,
            kappa=1.0,
        )
        hvar = var_decompose(homo)
        hbound = homo_bound(homo_sigma2, homo.rho_max, homo.w)
        if hbound < hvar - 1e-9 * max(1.0, abs(hvar)):
            homo_violations += 1
    return {
        "sweeps": n_sweeps,
        "seed": seed,
        "hetero_bound_violations": bound_violations,
        "homo_bound_violations": homo_violations,
        "condition_fired": condition_fired,
        "condition_counterexamples": condition_counterexamples,
    }
