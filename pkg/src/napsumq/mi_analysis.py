"""Downstream logistic regression and Rubin's rules for synthetic data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm, t as student_t
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from napsumq._random import as_generator
from napsumq.schema import Dataset


class CombineError(ValueError):
    pass


_SEPARATION_LOGIT = 16.0


# -- logistic regression -----------------------------------------------------


def _newton_logistic(X, y, w, lam, tol, max_iter, beta0=None):
    """Weighted penalised logistic MLE by Newton's method with step halving.

    Returns ``(beta, converged, hessian)`` where ``hessian`` is the negative
    Hessian of the penalised log-likelihood at ``beta``.
    """
    p = X.shape[1]
    beta = np.zeros(p) if beta0 is None else beta0.copy()

    def loglik(b):
        eta = X @ b
        return float(w @ (y * eta - np.logaddexp(0.0, eta))) - 0.5 * lam * float(b @ b)

    ll = loglik(beta)
    converged = False
    for _ in range(max_iter):
        mu = expit(X @ beta)
        score = X.T @ (w * (y - mu)) - lam * beta
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        H = (X * (w * mu * (1.0 - mu))[:, None]).T @ X + lam * np.eye(p)
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, ll = cand, ll_new
        if np.max(np.abs(beta)) > 1e3:
            break
    mu = expit(X @ beta)
    H = (X * (w * mu * (1.0 - mu))[:, None]).T @ X + lam * np.eye(p)
    if np.max(np.abs(beta)) > 1e3:
        converged = False
    return beta, converged, H


def _unique_rows(A: np.ndarray):
    """``np.unique(A, axis=0, return_inverse=True)`` with a fast path for
    small non-negative integer tables (the usual categorical design)."""
    if A.size and np.all(A == np.round(A)) and A.min() >= 0:
        radix = A.max(axis=0).astype(np.int64) + 1
        if np.prod(radix.astype(float)) < 2**62:
            keys = np.ravel_multi_index(A.astype(np.int64).T, radix)
            uk, inverse = np.unique(keys, return_inverse=True)
            uniq = np.column_stack(np.unravel_index(uk, radix)).astype(A.dtype)
            return uniq, inverse.ravel()
    uniq, inverse = np.unique(A, axis=0, return_inverse=True)
    return uniq, inverse.ravel()


def _inverse_or_inf(H: np.ndarray) -> np.ndarray:
    try:
        inv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.full(H.shape[0], np.inf)
    d = np.diag(inv).copy()
    d[~np.isfinite(d) | (d < 0)] = np.inf
    return d


class LogisticRegressionIRLS(ClassifierMixin, BaseEstimator):
    """Penalised logistic regression fitted by Newton/IRLS, with variances.

    Parameters
    ----------
    reg_lambda : float
        Weight of the ``(lambda / 2) ||beta||^2`` penalty (intercept included).
    variance_method : {"observed_information", "bootstrap"}
        ``observed_information`` inverts the negative Hessian at the fit.
        ``bootstrap`` refits on ``n_bootstrap`` row resamples and reports the
        per-coefficient sample variance.
    """

    def __init__(
        self,
        reg_lambda: float = 0.0,
        variance_method: str = "observed_information",
        n_bootstrap: int = 50,
        fit_intercept: bool = True,
        tol: float = 1e-8,
        max_iter: int = 100,
        random_state=None,
    ):
        self.reg_lambda = reg_lambda
        self.variance_method = variance_method
        self.n_bootstrap = n_bootstrap
        self.fit_intercept = fit_intercept
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def _design(self, X):
        if self.fit_intercept:
            return np.column_stack([np.ones(X.shape[0]), X])
        return X

    def fit(self, X, y, sample_weight=None):
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        if self.variance_method not in ("observed_information", "bootstrap"):
            raise ValueError(f"unknown variance_method {self.variance_method!r}")
        X, y = check_X_y(X, y, dtype=np.float64)
        if not np.all(np.isin(y, (0, 1))):
            raise ValueError("dependent variable must be binary 0/1")
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, float)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        # identical rows carry identical likelihood terms: fit on unique rows
        Xy = np.column_stack([X, y])
        uniq, inverse = _unique_rows(Xy)
        counts = np.bincount(inverse, weights=w, minlength=len(uniq))
        D = self._design(uniq[:, :-1])
        yu = uniq[:, -1]
        beta, converged, H = _newton_logistic(
            D, yu, counts, self.reg_lambda, self.tol, self.max_iter
        )
        if self.reg_lambda == 0 and np.max(np.abs(D @ beta)) > _SEPARATION_LOGIT:
            # a fitted probability pinned at 0 or 1: the MLE does not exist and
            # the iterate only looks converged because the score underflows
            converged = False
        if self.variance_method == "observed_information":
            var = _inverse_or_inf(H)
        else:
            var = self._bootstrap(D, yu, counts, beta)
        self.params_ = beta
        self.params_var_ = var
        self.converged_ = bool(converged)
        if self.fit_intercept:
            self.intercept_ = np.array([beta[0]])
            self.coef_ = beta[None, 1:]
        else:
            self.intercept_ = np.zeros(1)
            self.coef_ = beta[None, :]
        return self

    def _bootstrap(self, D, y, counts, beta):
        rng = as_generator(self.random_state)
        total = int(round(counts.sum()))
        probs = counts / counts.sum()
        fits = []
        for _ in range(self.n_bootstrap):
            wb = rng.multinomial(total, probs).astype(float)
            keep = wb > 0
            b, _, _ = _newton_logistic(
                D[keep], y[keep], wb[keep], self.reg_lambda, self.tol, self.max_iter, beta
            )
            fits.append(b)
        return np.var(np.asarray(fits), axis=0, ddof=1)

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return self._design(X) @ self.params_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def score_vector(self, X, y):
        """Gradient of the penalised log-likelihood at the fitted parameters."""
        check_is_fitted(self, "params_")
        D = self._design(check_array(X, dtype=np.float64))
        mu = expit(D @ self.params_)
        return D.T @ (np.asarray(y, float) - mu) - self.reg_lambda * self.params_


@dataclass
class AnalysisResult:
    q: np.ndarray
    v: np.ndarray
    converged: bool = True
    names: tuple[str, ...] = ()

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.q.shape != self.v.shape:
            raise ValueError("q and v must have equal length")
        if np.any(self.v < 0):
            raise ValueError("variance estimates must be non-negative")


def design_matrix(data: Dataset, independents: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Binary variables as 0/1, multi-level ones as dummies against level 0."""
    cols, names = [], []
    for name in independents:
        j = data.schema.index(name)
        var = data.schema.variables[j]
        x = data.rows[:, j]
        if var.cardinality == 2:
            cols.append(x.astype(float))
            names.append(name)
        else:
            for level in range(1, var.cardinality):
                cols.append((x == level).astype(float))
                names.append(f"{name}[{var.levels[level]}]")
    X = np.column_stack(cols) if cols else np.zeros((data.n, 0))
    return X, names


def logistic_fit(
    data: Dataset,
    dependent: str,
    independents: Sequence[str],
    reg_lambda: float = 0.0,
    variance_method: str = "observed_information",
    n_bootstrap: int = 50,
    rng_seed=None,
) -> AnalysisResult:
    """Fit ``dependent ~ 1 + independents`` and return estimates with variances."""
    j = data.schema.index(dependent)
    if data.schema.variables[j].cardinality != 2:
        raise ValueError(f"dependent variable {dependent!r} must be binary")
    X, names = design_matrix(data, independents)
    y = data.rows[:, j]
    est = LogisticRegressionIRLS(
        reg_lambda=reg_lambda,
        variance_method=variance_method,
        n_bootstrap=n_bootstrap,
        random_state=rng_seed,
    ).fit(X, y)
    return AnalysisResult(
        est.params_, est.params_var_, est.converged_, tuple(["intercept"] + names)
    )


# -- Rubin's rules -----------------------------------------------------------


@dataclass
class FilteredResults:
    """Per-coefficient estimate matrices with a keep-mask."""

    q: np.ndarray  # (m, p)
    v: np.ndarray  # (m, p)
    keep: np.ndarray  # (m, p) bool
    names: tuple[str, ...] = ()

    @property
    def dropped_fraction(self) -> np.ndarray:
        return 1.0 - self.keep.mean(axis=0)


def _stack(results) -> FilteredResults:
    if isinstance(results, FilteredResults):
        return results
    results = list(results)
    if not results:
        raise CombineError("no results to combine")
    dims = {r.q.shape for r in results}
    if len(dims) != 1:
        raise CombineError("all results must have the same number of coefficients")
    q = np.stack([r.q for r in results])
    v = np.stack([r.v for r in results])
    return FilteredResults(q, v, np.ones_like(q, dtype=bool), results[0].names)


def drop_outlier_variances(results, threshold: float = 1e3) -> FilteredResults:
    """Drop, coefficient by coefficient, estimates whose variance is >= threshold."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    fr = _stack(results)
    keep = fr.keep & (fr.v < threshold)
    empty = np.flatnonzero(~keep.any(axis=0))
    if empty.size:
        label = fr.names[empty[0]] if fr.names else f"#{empty[0]}"
        raise CombineError(f"every estimate of coefficient {label} has variance >= {threshold}")
    return FilteredResults(fr.q, fr.v, keep, fr.names)


@dataclass
class CombinedEstimate:
    q_bar: np.ndarray
    v_bar: np.ndarray
    b: np.ndarray
    T: np.ndarray
    T_star: np.ndarray
    r: np.ndarray
    nu: np.ndarray
    m: np.ndarray
    n_syn: int
    n: int
    dropped_fraction: np.ndarray = field(default=None)
    names: tuple[str, ...] = ()

    def interval(self, level: float = 0.95):
        return interval(self, level)

    def to_json(self, levels=(0.95,)) -> list[dict]:
        out = []
        for level in levels:
            lo, hi = interval(self, level)
            for j in range(len(self.q_bar)):
                out.append(
                    {
                        "coefficient": self.names[j] if self.names else j,
                        "q_bar": float(self.q_bar[j]),
                        "T_star": float(self.T_star[j]),
                        "nu": float(self.nu[j]),
                        "ci_lo": float(lo[j]),
                        "ci_hi": float(hi[j]),
                        "level": level,
                        "m_used": int(self.m[j]),
                        "dropped_fraction": float(self.dropped_fraction[j]),
                    }
                )
        return out


def combine(results, n_syn: int, n: int) -> CombinedEstimate:
    """Rubin's rules for fully synthetic data, one coefficient at a time."""
    fr = _stack(results)
    if fr.q.shape[0] < 2:
        raise CombineError(f"need at least 2 results, got {fr.q.shape[0]}")
    p = fr.q.shape[1]
    fields_ = {k: np.empty(p) for k in ("q_bar", "v_bar", "b", "T", "T_star", "r", "nu")}
    m_used = fr.keep.sum(axis=0)
    for j in range(p):
        q = fr.q[fr.keep[:, j], j]
        v = fr.v[fr.keep[:, j], j]
        m = len(q)
        if m < 2:
            raise CombineError(f"coefficient {j} has {m} usable estimates, need 2")
        q_bar = q.mean()
        v_bar = v.mean()
        b = float(np.sum((q - q_bar) ** 2) / (m - 1))
        T = (1.0 + 1.0 / m) * b - v_bar
        T_star = T if T >= 0 else (n_syn / n) * v_bar
        if v_bar == 0:
            raise CombineError(f"coefficient {j}: all variance estimates are zero, r undefined")
        r = (1.0 + 1.0 / m) * b / v_bar
        nu = (m - 1) * (1.0 - 1.0 / r) ** 2 if r > 0 else math.inf
        for key, val in zip(fields_, (q_bar, v_bar, b, T, T_star, r, nu)):
            fields_[key][j] = val
    return CombinedEstimate(
        **fields_,
        m=m_used,
        n_syn=n_syn,
        n=n,
        dropped_fraction=fr.dropped_fraction,
        names=fr.names,
    )


def t_quantile(prob: float, nu) -> np.ndarray:
    """Student-t quantile, accepting fractional and infinite degrees of freedom."""
    nu = np.asarray(nu, dtype=float)
    return np.where(np.isinf(nu), norm.ppf(prob), student_t.ppf(prob, np.where(np.isinf(nu), 1.0, nu)))


def interval(ce: CombinedEstimate, level: float = 0.95):
    """``q_bar -/+ t_{nu, (1+level)/2} sqrt(T*)`` per coefficient."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    half = t_quantile((1.0 + level) / 2.0, ce.nu) * np.sqrt(ce.T_star)
    half = np.where(ce.T_star == 0, 0.0, half)
    return ce.q_bar - half, ce.q_bar + half


def naive_interval(result: AnalysisResult, level: float = 0.95):
    """Single-dataset Wald interval from the analysis' own variance."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    half = norm.ppf((1.0 + level) / 2.0) * np.sqrt(result.v)
    return result.q - half, result.q + half
