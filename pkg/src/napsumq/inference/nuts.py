"""No-U-Turn sampler with multinomial trajectory sampling.

Trajectories are built by repeated doubling; proposals inside a subtree are
drawn multinomially (uniform progressive sampling) and the top-level merge
is biased towards the newer subtree. Termination uses the generalised
U-turn criterion on summed momenta, including the checks across merged
subtrees. Warmup adapts only the step size, by dual averaging.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from napsumq._random import as_generator, derive_seed
from napsumq.inference.diagnostics import summarize

logger = logging.getLogger(__name__)

_MAX_ENERGY_ERROR = 1000.0


@dataclass
class NUTSConfig:
    num_chains: int = 4
    num_warmup: int = 800
    num_samples: int = 2000
    max_tree_depth: int = 12
    target_accept: float = 0.8
    init_step_size: float | None = None
    rhat_limit: float = 1.05
    divergence_warn_fraction: float = 0.01


@dataclass
class PosteriorSamples:
    """Pooled draws, one row per kept sample, with per-chain labels."""

    draws: np.ndarray
    chain_ids: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def flagged(self) -> bool:
        return bool(self.diagnostics.get("flagged", False))

    def by_chain(self) -> np.ndarray:
        chains = np.unique(self.chain_ids)
        return np.stack([self.draws[self.chain_ids == c] for c in chains])

    def thin(self, m: int) -> np.ndarray:
        """``m`` draws evenly spaced across the pooled chains."""
        if m > self.n_draws:
            raise ValueError(f"asked for {m} draws from {self.n_draws}")
        idx = np.linspace(0, self.n_draws - 1, m).round().astype(int)
        return self.draws[idx]

    def to_csv(self, path) -> None:
        header = "chain," + ",".join(f"theta_{j}" for j in range(self.draws.shape[1]))
        body = np.column_stack([self.chain_ids, self.draws])
        fmt = ["%d"] + ["%.17g"] * self.draws.shape[1]
        np.savetxt(path, body, delimiter=",", header=header, comments="", fmt=fmt)

    @classmethod
    def from_csv(cls, path, diagnostics: dict | None = None) -> "PosteriorSamples":
        body = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(body[:, 1:], body[:, 0].astype(int), diagnostics or {})


# -- trajectory building -----------------------------------------------------


class _Metric:
    def __init__(self, dim: int, inv_mass=None):
        self.dim = dim
        if inv_mass is None:
            self.inv_mass = None
            self.mass_chol = None
        else:
            inv_mass = np.asarray(inv_mass, dtype=float)
            self.inv_mass = inv_mass
            self.mass_chol = np.linalg.cholesky(np.linalg.inv(inv_mass))

    def sharp(self, p):
        return p if self.inv_mass is None else self.inv_mass @ p

    def kinetic(self, p) -> float:
        return 0.5 * float(p @ self.sharp(p))

    def draw(self, rng) -> np.ndarray:
        e = rng.standard_normal(self.dim)
        return e if self.mass_chol is None else self.mass_chol @ e


def leapfrog(logp_and_grad, z, p, grad, step, metric: _Metric | None = None):
    """One velocity-Verlet step; returns ``(z, p, logp, grad)``."""
    metric = metric or _Metric(len(z))
    p = p + 0.5 * step * grad
    z = z + step * metric.sharp(p)
    logp, grad = logp_and_grad(z)
    p = p + 0.5 * step * grad
    return z, p, logp, grad


@dataclass
class _Tree:
    z_minus: np.ndarray
    p_minus: np.ndarray
    g_minus: np.ndarray
    z_plus: np.ndarray
    p_plus: np.ndarray
    g_plus: np.ndarray
    z_prop: np.ndarray
    logp_prop: float
    g_prop: np.ndarray
    log_weight: float
    p_sum: np.ndarray
    turning: bool
    diverging: bool
    sum_accept: float
    n_leapfrog: int


class _Sampler:
    def __init__(self, logp_and_grad, dim, config: NUTSConfig, metric: _Metric, rng):
        self.logp_and_grad = self._safe(logp_and_grad)
        self.dim = dim
        self.config = config
        self.metric = metric
        self.rng = rng

    @staticmethod
    def _safe(fn):
        def wrapped(z):
            try:
                lp, g = fn(z)
            except (np.linalg.LinAlgError, FloatingPointError, ValueError, OverflowError):
                return -math.inf, np.zeros_like(z)
            if not np.isfinite(lp) or not np.all(np.isfinite(g)):
                return -math.inf, np.zeros_like(z)
            return float(lp), np.asarray(g, dtype=float)

        return wrapped

    def _turning(self, p_minus, p_plus, rho) -> bool:
        return (
            float(self.metric.sharp(p_plus) @ rho) <= 0
            or float(self.metric.sharp(p_minus) @ rho) <= 0
        )

    def _merge(self, old: _Tree, new: _Tree, direction: int, biased: bool) -> _Tree:
        left, right = (old, new) if direction == 1 else (new, old)
        log_w = float(np.logaddexp(old.log_weight, new.log_weight))
        if biased:
            accept = min(1.0, math.exp(min(0.0, new.log_weight - old.log_weight)))
        else:
            accept = math.exp(new.log_weight - log_w) if np.isfinite(log_w) else 0.0
        take_new = self.rng.random() < accept
        src = new if take_new else old
        p_sum = left.p_sum + right.p_sum
        turning = new.turning or old.turning
        if not turning:
            turning = (
                self._turning(left.p_minus, right.p_plus, p_sum)
                or self._turning(left.p_minus, right.p_minus, left.p_sum + right.p_minus)
                or self._turning(left.p_plus, right.p_plus, right.p_sum + left.p_plus)
            )
        return _Tree(
            left.z_minus, left.p_minus, left.g_minus,
            right.z_plus, right.p_plus, right.g_plus,
            src.z_prop, src.logp_prop, src.g_prop,
            log_w, p_sum, turning,
            old.diverging or new.diverging,
            old.sum_accept + new.sum_accept,
            old.n_leapfrog + new.n_leapfrog,
        )

    def _build(self, z, p, g, direction, depth, step, H0) -> _Tree:
        if depth == 0:
            z1, p1, lp1, g1 = leapfrog(
                self.logp_and_grad, z, p, g, direction * step, self.metric
            )
            H = -lp1 + self.metric.kinetic(p1) if np.isfinite(lp1) else math.inf
            delta = H - H0
            if math.isnan(delta):
                delta = math.inf
            return _Tree(
                z1, p1, g1, z1, p1, g1, z1, lp1, g1,
                -delta, p1.copy(), False, delta > _MAX_ENERGY_ERROR,
                min(1.0, math.exp(-delta)) if delta > 0 else 1.0, 1,
            )
        first = self._build(z, p, g, direction, depth - 1, step, H0)
        if first.turning or first.diverging:
            return first
        if direction == 1:
            start = (first.z_plus, first.p_plus, first.g_plus)
        else:
            start = (first.z_minus, first.p_minus, first.g_minus)
        second = self._build(*start, direction, depth - 1, step, H0)
        return self._merge(first, second, direction, biased=False)

    def transition(self, z, logp, g, step):
        p0 = self.metric.draw(self.rng)
        H0 = -logp + self.metric.kinetic(p0)
        tree = _Tree(z, p0, g, z, p0, g, z, logp, g, 0.0, p0.copy(), False, False, 0.0, 0)
        sum_accept, n_leap, diverged, depth = 0.0, 0, False, 0
        for depth in range(self.config.max_tree_depth):
            direction = 1 if self.rng.random() < 0.5 else -1
            if direction == 1:
                start = (tree.z_plus, tree.p_plus, tree.g_plus)
            else:
                start = (tree.z_minus, tree.p_minus, tree.g_minus)
            new = self._build(*start, direction, depth, step, H0)
            sum_accept += new.sum_accept
            n_leap += new.n_leapfrog
            if new.diverging:
                diverged = True
                break
            if new.turning:
                break
            tree = self._merge(tree, new, direction, biased=True)
            if tree.turning:
                break
        accept = sum_accept / max(n_leap, 1)
        return tree.z_prop, tree.logp_prop, tree.g_prop, accept, diverged, depth + 1, n_leap

    def find_step_size(self, z, logp, g) -> float:
        step = 1.0
        p = self.metric.draw(self.rng)
        H0 = -logp + self.metric.kinetic(p)

        def log_accept(eps):
            _, p1, lp1, _ = leapfrog(self.logp_and_grad, z, p, g, eps, self.metric)
            if not np.isfinite(lp1):
                return -math.inf
            return H0 - (-lp1 + self.metric.kinetic(p1))

        direction = 1 if log_accept(step) > math.log(0.5) else -1
        for _ in range(100):
            if direction == 1 and not log_accept(step) > math.log(0.5):
                break
            if direction == -1 and not log_accept(step) < math.log(0.5):
                break
            step = step * 2.0 if direction == 1 else step * 0.5
        return step


def run_chain(
    logp_and_grad,
    init,
    config: NUTSConfig,
    rng_seed=None,
    inv_mass=None,
):
    """Run one NUTS chain; returns kept draws and per-iteration statistics."""
    rng = as_generator(rng_seed)
    init = np.asarray(init, dtype=float)
    metric = _Metric(init.size, inv_mass)
    sampler = _Sampler(logp_and_grad, init.size, config, metric, rng)
    z = init.copy()
    logp, g = sampler.logp_and_grad(z)
    if not np.isfinite(logp):
        raise ValueError("initial point has non-finite log density")
    step = config.init_step_size or sampler.find_step_size(z, logp, g)

    mu = math.log(10.0 * step)
    h_bar, log_step_bar = 0.0, 0.0
    gamma, t0, kappa = 0.05, 10.0, 0.75
    for m in range(1, config.num_warmup + 1):
        z, logp, g, accept, _, _, _ = sampler.transition(z, logp, g, step)
        eta = 1.0 / (m + t0)
        h_bar = (1.0 - eta) * h_bar + eta * (config.target_accept - accept)
        log_step = mu - math.sqrt(m) / gamma * h_bar
        w = m ** (-kappa)
        log_step_bar = w * log_step + (1.0 - w) * log_step_bar
        step = math.exp(log_step)
    if config.num_warmup > 0:
        step = math.exp(log_step_bar)

    draws = np.empty((config.num_samples, init.size))
    accepts = np.empty(config.num_samples)
    divergent = np.zeros(config.num_samples, dtype=bool)
    depths = np.empty(config.num_samples, dtype=int)
    n_leapfrog = 0
    for i in range(config.num_samples):
        z, logp, g, accepts[i], divergent[i], depths[i], nl = sampler.transition(z, logp, g, step)
        n_leapfrog += nl
        draws[i] = z
    stats = {
        "step_size": step,
        "mean_accept": float(accepts.mean()) if len(accepts) else float("nan"),
        "divergences": int(divergent.sum()),
        "max_depth_hits": int((depths >= config.max_tree_depth).sum()),
        "n_leapfrog": n_leapfrog,
    }
    return draws, stats


def sample_nuts(
    logp_and_grad,
    dim: int,
    config: NUTSConfig | None = None,
    rng_seed=None,
    inv_mass=None,
    init_fn=None,
    transform=None,
) -> PosteriorSamples:
    """Run ``config.num_chains`` independent chains and pool them.

    ``transform`` maps sampler-space draws to reported draws (used for the
    Laplace whitening); diagnostics are computed on the reported draws.
    """
    config = config or NUTSConfig()
    chains, stats = [], []
    for c in range(config.num_chains):
        seed = derive_seed(rng_seed, c)
        rng = as_generator(derive_seed(seed, 0))
        init = init_fn(rng) if init_fn is not None else rng.standard_normal(dim)
        draws, st = run_chain(logp_and_grad, init, config, derive_seed(seed, 1), inv_mass)
        if transform is not None:
            draws = transform(draws)
        chains.append(draws)
        stats.append(st)
    stacked = np.stack(chains)
    diag = summarize(stacked) if config.num_samples >= 4 else {"r_hat": [], "ess": []}
    divergences = sum(s["divergences"] for s in stats)
    total = config.num_chains * config.num_samples
    diag.update(
        divergences=divergences,
        chains=stats,
        flagged=bool(diag["r_hat"]) and max(diag["r_hat"]) > config.rhat_limit,
        divergence_warning=divergences > config.divergence_warn_fraction * total,
        config=asdict(config),
    )
    if diag["flagged"]:
        logger.warning("R-hat above %.2f: %s", config.rhat_limit, max(diag["r_hat"]))
    if diag["divergence_warning"]:
        logger.warning("%d divergent transitions out of %d", divergences, total)
    return PosteriorSamples(
        draws=stacked.reshape(-1, stacked.shape[2]),
        chain_ids=np.repeat(np.arange(config.num_chains), config.num_samples),
        diagnostics=diag,
    )


def nuts_sample(post, la, config: NUTSConfig | None = None, rng_seed=None) -> PosteriorSamples:
    """Sample ``post`` in the coordinates whitened by the Laplace approximation.

    theta = la.mean + L z with L the Cholesky factor of ``la.covariance``;
    NUTS runs on z with an identity metric and draws are mapped back.
    """
    L = la.cholesky
    mean = la.mean

    def logp_z(z):
        lp, g = post.log_density_and_grad(mean + L @ z)
        return lp, L.T @ g

    return sample_nuts(
        logp_z,
        mean.size,
        config,
        rng_seed,
        transform=lambda z: mean + z @ L.T,
    )
