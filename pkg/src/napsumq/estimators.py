"""Estimator-style front ends for the synthetic data generators.

Both generators follow the scikit-learn conventions: hyperparameters go to
``__init__`` (so ``get_params``/``set_params``/``clone`` work), ``fit``
learns from data and sets trailing-underscore attributes, and ``generate``
produces synthetic datasets. Real data is touched once, to compute the
query counts that are noised; everything after that works from the
:class:`~napsumq.privacy.NoisyRelease` alone (see ``fit_release``).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from napsumq._random import derive_seed, seed_to_int
from napsumq.inference import (
    NoiseAwarePosterior,
    NUTSConfig,
    laplace_fit,
    nuts_sample,
)
from napsumq.med import MEDFamily, MEDModel, fit_pgm_mle
from napsumq.privacy import NoisyRelease, PrivacyBudget, calibrate_sigma, gaussian_mechanism
from napsumq.queries import (
    QueryCollection,
    canonicalize,
    evaluate_dataset,
    full_marginal_sets,
    sensitivity,
)
from napsumq.schema import Dataset, Schema


def _as_dataset(X, schema: Schema | None) -> Dataset:
    if isinstance(X, Dataset):
        if schema is not None and schema != X.schema:
            raise ValueError("schema does not match the dataset")
        return X
    if schema is None:
        raise ValueError("a schema is required when X is not a Dataset")
    return Dataset(schema, np.asarray(X))


class _ReleaseMixin:
    """Shared data-touching stage: counts, calibration and noising."""

    def _build_queries(self, schema: Schema) -> QueryCollection:
        if self.queries is None:
            raise ValueError("queries (a list of scopes) must be set")
        if isinstance(self.queries, QueryCollection):
            qc = self.queries
        else:
            qc = full_marginal_sets(schema, self.queries)
        if self.canonical and not qc.canonical:
            qc = canonicalize(qc)
        return qc

    def _release(self, data: Dataset, qc: QueryCollection, seed) -> NoisyRelease:
        budget = PrivacyBudget(self.epsilon, self.delta)
        sens = sensitivity(qc)
        sigma = calibrate_sigma(budget, sens)
        counts = evaluate_dataset(qc, data)
        return gaussian_mechanism(
            counts,
            sigma,
            seed,
            budget=budget,
            sensitivity=sens,
            query_fingerprint=qc.fingerprint(),
            n=data.n,
        )


class NapsuMQ(_ReleaseMixin, BaseEstimator):
    """Noise-aware synthetic data from noisy marginal queries.

    Parameters
    ----------
    queries : list of scopes or QueryCollection
        Scopes (variable names or indices) whose full marginal sets are
        released.
    epsilon, delta : float
        Privacy budget for the single Gaussian-mechanism release.
    inference : {"laplace", "nuts"}
        Posterior approximation. NUTS runs in coordinates whitened by the
        Laplace approximation.
    prior_std : float
        Standard deviation of the N(0, prior_std^2) prior on each parameter.
    nuts_config : NUTSConfig, optional
    canonical : bool
        Prune the queries to an identifiable set before release.
    backend : {"auto", "enumeration", "junction_tree"}
    laplace_max_iter : int
    random_state : int, SeedSequence or None

    Attributes
    ----------
    queries_ : QueryCollection
    release_ : NoisyRelease
    posterior_ : NoiseAwarePosterior
    laplace_ : LaplaceApprox
    samples_ : PosteriorSamples or None
    """

    def __init__(
        self,
        queries=None,
        epsilon: float = 1.0,
        delta: float = 1e-6,
        inference: str = "laplace",
        prior_std: float = 10.0,
        nuts_config: NUTSConfig | None = None,
        canonical: bool = True,
        backend: str = "auto",
        laplace_max_iter: int = 500,
        random_state=None,
    ):
        self.queries = queries
        self.epsilon = epsilon
        self.delta = delta
        self.inference = inference
        self.prior_std = prior_std
        self.nuts_config = nuts_config
        self.canonical = canonical
        self.backend = backend
        self.laplace_max_iter = laplace_max_iter
        self.random_state = random_state

    def fit(self, X, y=None, schema: Schema | None = None):
        data = _as_dataset(X, schema)
        qc = self._build_queries(data.schema)
        release = self._release(data, qc, derive_seed(self.random_state, 0))
        return self.fit_release(release, qc)

    def fit_release(self, release: NoisyRelease, queries: QueryCollection):
        """Run noise-aware inference from a release alone."""
        if self.inference not in ("laplace", "nuts"):
            raise ValueError(f"unknown inference {self.inference!r}")
        self.queries_ = queries
        self.release_ = release
        self.family_ = MEDFamily(queries, backend=self.backend)
        self.posterior_ = NoiseAwarePosterior(self.family_, release, prior_std=self.prior_std)
        self.laplace_ = laplace_fit(
            self.posterior_,
            derive_seed(self.random_state, 1),
            max_iter=self.laplace_max_iter,
        )
        self.samples_ = None
        if self.inference == "nuts":
            self.samples_ = nuts_sample(
                self.posterior_,
                self.laplace_,
                self.nuts_config or NUTSConfig(),
                derive_seed(self.random_state, 2),
            )
        return self

    def sample_parameters(self, m: int, random_state=None) -> np.ndarray:
        """``m`` posterior parameter vectors (Laplace draws or thinned NUTS)."""
        check_is_fitted(self, "laplace_")
        if self.samples_ is not None:
            return self.samples_.thin(m)
        return self.laplace_.sample(m, random_state)

    def generate(self, m: int, n_syn: int, random_state=None) -> list[Dataset]:
        """``m`` synthetic datasets of ``n_syn`` rows, one per posterior draw."""
        check_is_fitted(self, "laplace_")
        seed = derive_seed(random_state if random_state is not None else self.random_state, 3)
        thetas = self.sample_parameters(m, derive_seed(seed, 0))
        return [
            self.family_.sample(theta, n_syn, derive_seed(seed, 1, i))
            for i, theta in enumerate(thetas)
        ]

    def posterior_json(self) -> dict:
        check_is_fitted(self, "laplace_")
        out = {
            "queries": self.queries_.to_json(),
            "prior_std": self.prior_std,
            "inference": self.inference,
            "laplace": self.laplace_.to_json(),
            "seed": seed_to_int(self.random_state),
        }
        if self.samples_ is not None:
            diag = dict(self.samples_.diagnostics)
            out["nuts"] = {
                "r_hat": diag["r_hat"],
                "ess": diag["ess"],
                "divergences": diag["divergences"],
                "flagged": diag["flagged"],
            }
        return out


class PGMGenerator(_ReleaseMixin, BaseEstimator):
    """Point-estimate baseline: minimise ``||s_tilde - n mu(theta)||`` and
    sample every synthetic dataset from that single parameter vector.

    ``canonical=False`` keeps the raw full marginal sets, as graphical-model
    estimators without noise awareness normally do.
    """

    def __init__(
        self,
        queries=None,
        epsilon: float = 1.0,
        delta: float = 1e-6,
        canonical: bool = False,
        backend: str = "auto",
        max_iter: int = 5000,
        tol: float = 1e-8,
        random_state=None,
    ):
        self.queries = queries
        self.epsilon = epsilon
        self.delta = delta
        self.canonical = canonical
        self.backend = backend
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None, schema: Schema | None = None):
        data = _as_dataset(X, schema)
        qc = self._build_queries(data.schema)
        release = self._release(data, qc, derive_seed(self.random_state, 0))
        return self.fit_release(release, qc)

    def fit_release(self, release: NoisyRelease, queries: QueryCollection):
        self.queries_ = queries
        self.release_ = release
        self.model_: MEDModel = fit_pgm_mle(
            release, queries, backend=self.backend, tol=self.tol, max_iter=self.max_iter
        )
        return self

    def sample_parameters(self, m: int, random_state=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        return np.repeat(self.model_.theta[None, :], m, axis=0)

    def generate(self, m: int, n_syn: int, random_state=None) -> list[Dataset]:
        check_is_fitted(self, "model_")
        seed = derive_seed(random_state if random_state is not None else self.random_state, 3)
        return [self.model_.sample(n_syn, derive_seed(seed, 1, i)) for i in range(m)]
