"""Convergence diagnostics: rank-normalised split R-hat and bulk ESS."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


def _split(chains: np.ndarray) -> np.ndarray:
    # chains: (n_chains, n_draws)
    half = chains.shape[1] // 2
    return np.concatenate([chains[:, :half], chains[:, -half:]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 3.0 / 8.0) / (x.size + 1.0 / 4.0))


def _rhat_raw(x: np.ndarray) -> float:
    m, n = x.shape
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def split_rhat(chains) -> float:
    """Rank-normalised split R-hat for one parameter, shape (chains, draws)."""
    x = _split(np.asarray(chains, dtype=float))
    return _rhat_raw(_rank_normalize(x))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    x = x - x.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, size)
    ac = np.fft.irfft(f * np.conj(f), size)[:n]
    return ac / n


def _ess_raw(x: np.ndarray) -> float:
    m, n = x.shape
    acov = np.stack([_autocov(c) for c in x])
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = chain_var.mean()
    var_plus = W * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus == 0:
        return float(m * n)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer initial positive and monotone sequence over pairs
    total = 0.0
    prev = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def bulk_ess(chains) -> float:
    x = _split(np.asarray(chains, dtype=float))
    return _ess_raw(_rank_normalize(x))


def summarize(draws: np.ndarray) -> dict:
    """Diagnostics per parameter for draws of shape (chains, draws, dim)."""
    draws = np.asarray(draws, dtype=float)
    dim = draws.shape[2]
    return {
        "r_hat": [split_rhat(draws[:, :, j]) for j in range(dim)],
        "ess": [bulk_ess(draws[:, :, j]) for j in range(dim)],
    }
