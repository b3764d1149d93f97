"""MAP search with L-BFGS and a Gaussian approximation at the mode."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from napsumq._random import as_generator

logger = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    pass


@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    status: str  # "converged", "diverged", "max_iter", "stalled"


def lbfgs_minimize(
    fun_and_grad,
    x0,
    *,
    memory: int = 10,
    tol: float = 1e-5,
    max_iter: int = 500,
    divergence: float = 1000.0,
) -> LBFGSResult:
    """Two-loop L-BFGS with Armijo backtracking.

    Stops when one iteration improves the loss by less than ``tol``. A loss
    increase of more than ``divergence`` in one iteration, or a non-finite
    loss, is reported as ``diverged``.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun_and_grad(x)
    if not np.isfinite(f):
        return LBFGSResult(x, f, g, 0, "diverged")
    S: deque = deque(maxlen=memory)
    Y: deque = deque(maxlen=memory)
    for it in range(1, max_iter + 1):
        q = g.copy()
        alphas = []
        for s, y in reversed(list(zip(S, Y))):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            alphas.append((rho, a, s, y))
            q -= a * y
        if S:
            gamma = float(S[-1] @ Y[-1]) / float(Y[-1] @ Y[-1])
        else:
            gamma = 1.0 / max(np.linalg.norm(g), 1.0)
        r = gamma * q
        for rho, a, s, y in reversed(alphas):
            b = rho * float(y @ r)
            r += (a - b) * s
        direction = -r
        slope = float(g @ direction)
        if slope >= 0:
            S.clear()
            Y.clear()
            direction = -g / max(np.linalg.norm(g), 1.0)
            slope = float(g @ direction)
        t = 1.0
        accepted = False
        for _ in range(60):
            x_new = x + t * direction
            f_new, g_new = fun_and_grad(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if not np.isfinite(f_new) or f_new - f > divergence:
                return LBFGSResult(x, f, g, it, "diverged")
            return LBFGSResult(x, f, g, it, "stalled")
        if f_new - f > divergence:
            return LBFGSResult(x_new, f_new, g_new, it, "diverged")
        s, y = x_new - x, g_new - g
        if float(s @ y) > 1e-12 * float(y @ y):
            S.append(s)
            Y.append(y)
        improvement = f - f_new
        x, f, g = x_new, f_new, g_new
        if improvement < tol:
            return LBFGSResult(x, f, g, it, "converged")
    return LBFGSResult(x, f, g, max_iter, "max_iter")


def fd_hessian(grad_fn, x, rel_step: float = 1e-4) -> np.ndarray:
    """Symmetrised central-difference Jacobian of ``grad_fn``."""
    x = np.asarray(x, dtype=np.float64)
    k = x.size
    H = np.empty((k, k))
    for j in range(k):
        h = rel_step * (1.0 + abs(x[j]))
        e = np.zeros(k)
        e[j] = h
        H[:, j] = (grad_fn(x + e) - grad_fn(x - e)) / (2.0 * h)
    return 0.5 * (H + H.T)


def _pd_inverse(H: np.ndarray):
    """Inverse of a symmetric matrix that should be PD, with jitter repair."""
    scale = float(np.mean(np.abs(np.diag(H)))) or 1.0
    jitter = 0.0
    while True:
        try:
            L = np.linalg.cholesky(H + jitter * np.eye(len(H)))
            Linv = np.linalg.inv(L)
            return Linv.T @ Linv, jitter
        except np.linalg.LinAlgError:
            jitter = 1e-8 * scale if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-4 * scale:
                raise OptimizationError(
                    "negative log-posterior Hessian is not positive definite; smallest "
                    f"eigenvalue {np.linalg.eigvalsh(H).min():.3e}"
                ) from None


@dataclass
class LaplaceApprox:
    """Gaussian approximation centred at the posterior mode."""

    mean: np.ndarray
    covariance: np.ndarray
    log_density: float = float("nan")
    grad_inf_norm: float = float("nan")
    restarts: int = 0
    n_iter: int = 0
    jitter: float = 0.0
    history: list = field(default_factory=list)

    @property
    def cholesky(self) -> np.ndarray:
        return np.linalg.cholesky(self.covariance)

    def sample(self, m: int, rng_seed=None) -> np.ndarray:
        rng = as_generator(rng_seed)
        z = rng.standard_normal((m, self.mean.size))
        return self.mean + z @ self.cholesky.T

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "log_density": self.log_density,
            "grad_inf_norm": self.grad_inf_norm,
            "restarts": self.restarts,
        }


def laplace_fit(
    post,
    rng_seed=None,
    *,
    tol: float = 1e-5,
    max_iter: int = 500,
    max_restarts: int = 5,
    init_std: float = 0.1,
    grad_tol: float = 1e-6,
    newton_steps: int = 20,
) -> LaplaceApprox:
    """Laplace approximation of ``post`` (anything with ``log_density_and_grad``).

    The first run starts from zero; failed runs (divergence or hitting
    ``max_iter``) restart from N(0, init_std^2) draws. The L-BFGS result is
    polished with damped Newton steps on the finite-difference Hessian so
    the returned mean is a stationary point, and the covariance is the
    inverse of that Hessian.
    """
    rng = as_generator(rng_seed)
    dim = post.dim

    def neg(x):
        v, g = post.log_density_and_grad(x)
        return -v, -g

    def neg_grad(x):
        return -post.log_density_and_grad(x)[1]

    x0 = np.zeros(dim)
    history = []
    for attempt in range(max_restarts + 1):
        try:
            res = lbfgs_minimize(neg, x0, tol=tol, max_iter=max_iter)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            history.append(f"error: {exc}")
            res = None
        if res is not None:
            history.append(res.status)
            if res.status in ("converged", "stalled"):
                break
        logger.info("restarting MAP search (attempt %d)", attempt + 1)
        x0 = init_std * rng.standard_normal(dim)
    else:
        raise OptimizationError(f"MAP search failed after {max_restarts} restarts: {history}")

    x, f, g = res.x, res.fun, res.grad
    H = fd_hessian(neg_grad, x)
    for _ in range(newton_steps):
        if np.max(np.abs(g)) < grad_tol:
            break
        cov, _ = _pd_inverse(H)
        step = -cov @ g
        t = 1.0
        while t > 1e-8:
            f_new, g_new = neg(x + t * step)
            if np.isfinite(f_new) and f_new <= f + 1e-10 * max(1.0, abs(f)):
                break
            t *= 0.5
        else:
            break
        x, f, g = x + t * step, f_new, g_new
        H = fd_hessian(neg_grad, x)
    cov, jitter = _pd_inverse(H)
    cov = 0.5 * (cov + cov.T)
    return LaplaceApprox(
        mean=x,
        covariance=cov,
        log_density=-f,
        grad_inf_norm=float(np.max(np.abs(g))),
        restarts=len(history) - 1,
        n_iter=res.n_iter,
        jitter=jitter,
        history=history,
    )
