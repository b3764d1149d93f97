"""Noise-aware posterior over the log-linear parameters.

The exact count vector is replaced by its normal approximation and
marginalised, giving::

    theta ~ N(0, prior_std^2 I)
    s_tilde ~ N(n mu(theta), n Sigma(theta) + sigma_dp^2 I)

The gradient differentiates through both the mean and the covariance; the
covariance derivative is the third cumulant of the query features.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from napsumq.med import MEDFamily
from napsumq.privacy import NoisyRelease
from napsumq.queries import QueryCollection


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


def _cholesky_with_jitter(C: np.ndarray):
    try:
        return cho_factor(C, lower=True, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(C)))
    jitter = 1e-8 * scale
    while jitter <= 1e-4 * scale:
        try:
            return cho_factor(C + jitter * np.eye(len(C)), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefiniteError(
        f"covariance not positive definite; smallest eigenvalue "
        f"{np.linalg.eigvalsh(C).min():.3e}"
    )


class NoiseAwarePosterior:
    """Unnormalised log posterior of theta given a noisy release.

    Parameters
    ----------
    queries : QueryCollection or MEDFamily
        Canonical queries the release was computed from.
    release : NoisyRelease
    n : int, optional
        Size of the original dataset; defaults to ``release.n``.
    prior_std : float
        Standard deviation of the isotropic zero-mean Gaussian prior.
    """

    def __init__(
        self,
        queries,
        release: NoisyRelease,
        n: int | None = None,
        prior_std: float = 10.0,
        backend: str = "auto",
    ):
        if not prior_std > 0:
            raise ValueError("prior_std must be positive")
        self.family = (
            queries if isinstance(queries, MEDFamily) else MEDFamily(queries, backend=backend)
        )
        qc: QueryCollection = self.family.queries
        if release.query_fingerprint and release.query_fingerprint != qc.fingerprint():
            raise ValueError("release was not produced from these queries")
        if len(release.s_tilde) != len(qc):
            raise ValueError("release length does not match the number of queries")
        self.release = release
        self.n = int(release.n if n is None else n)
        if self.n <= 0:
            raise ValueError("dataset size must be positive")
        self.prior_std = float(prior_std)
        self.s_tilde = np.asarray(release.s_tilde, dtype=np.float64)
        self.sigma_dp = float(release.sigma_dp)

    @property
    def dim(self) -> int:
        return self.family.n_params

    def _terms(self, theta):
        fam = self.family
        if fam.backend == "enumeration":
            logp = fam.log_probs(theta)
            p = np.exp(logp)
            F = fam.feature_matrix
            mu = F.T @ p
            centered = F - mu
            sigma = (centered * p[:, None]).T @ centered
            sigma = 0.5 * (sigma + sigma.T)

            def contract(A):
                quad = ((centered @ A) * centered).sum(axis=1)
                return centered.T @ (p * quad)

        else:
            m = fam.moments(theta)
            mu, sigma = m.mu, m.sigma
            kappa = fam.third_cumulant(theta)

            def contract(A):
                return np.einsum("jkl,jk->l", kappa, A)

        return mu, sigma, contract

    def log_density(self, theta) -> float:
        return self.log_density_and_grad(theta, need_grad=False)[0]

    def grad(self, theta) -> np.ndarray:
        return self.log_density_and_grad(theta)[1]

    def log_density_and_grad(self, theta, need_grad: bool = True):
        theta = np.asarray(theta, dtype=np.float64)
        n = self.n
        mu, sigma, contract = self._terms(theta)
        C = n * sigma + self.sigma_dp**2 * np.eye(len(mu))
        cf, _ = _cholesky_with_jitter(C)
        r = self.s_tilde - n * mu
        w = cho_solve(cf, r, check_finite=False)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        tau2 = self.prior_std**2
        value = -0.5 * float(r @ w) - 0.5 * logdet - 0.5 * float(theta @ theta) / tau2
        if not need_grad:
            return value, None
        Cinv = cho_solve(cf, np.eye(len(mu)), check_finite=False)
        grad = n * (sigma @ w) + 0.5 * n * contract(np.outer(w, w) - Cinv) - theta / tau2
        return value, grad

    def __call__(self, theta):
        return self.log_density_and_grad(theta)


def log_density(post: NoiseAwarePosterior, theta):
    """Return ``(log density up to a constant, gradient)``."""
    return post.log_density_and_grad(theta)
