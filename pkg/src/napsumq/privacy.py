"""Gaussian mechanism: analytic calibration, noising and release records."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr

from napsumq._random import as_generator, seed_to_int


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


def delta_of(epsilon: float, sigma: float, sensitivity: float) -> float:
    """Smallest delta for which the Gaussian mechanism is (epsilon, delta)-DP.

    Phi(D/2s - e s/D) - exp(e) Phi(-D/2s - e s/D), with the second term
    assembled in log space so large epsilon does not produce inf * 0.
    """
    if epsilon <= 0 or sigma <= 0 or sensitivity <= 0:
        raise ValueError("epsilon, sigma and sensitivity must all be positive")
    a = sensitivity / (2.0 * sigma)
    b = epsilon * sigma / sensitivity
    log_first = float(log_ndtr(a - b))
    log_second = epsilon + float(log_ndtr(-a - b))
    # first - second = first * (1 - exp(log_second - log_first))
    ratio = log_second - log_first
    if ratio >= 0.0 or log_first == -math.inf:
        return 0.0
    return math.exp(log_first) * -math.expm1(ratio)


def calibrate_sigma(
    budget: PrivacyBudget, sensitivity: float, rel_tol: float = 1e-12
) -> float:
    """Smallest noise scale meeting ``budget``, found by bisection on log sigma."""
    if sensitivity <= 0:
        raise ValueError("sensitivity must be positive")
    eps, target = budget.epsilon, budget.delta
    lo, hi = 1e-3 * sensitivity, 1e6 * sensitivity
    for _ in range(60):
        if delta_of(eps, lo, sensitivity) > target:
            break
        lo /= 10.0
    else:
        raise CalibrationError(f"could not bracket sigma from below (lo={lo})")
    for _ in range(60):
        if delta_of(eps, hi, sensitivity) <= target:
            break
        hi *= 10.0
    else:
        raise CalibrationError(f"could not bracket sigma from above (hi={hi})")
    log_lo, log_hi = math.log(lo), math.log(hi)
    # invariant: delta(lo) > target >= delta(hi)
    while log_hi - log_lo > rel_tol:
        mid = 0.5 * (log_lo + log_hi)
        if mid in (log_lo, log_hi):
            break
        if delta_of(eps, math.exp(mid), sensitivity) > target:
            log_lo = mid
        else:
            log_hi = mid
    return math.exp(log_hi)


@dataclass(frozen=True)
class NoisyRelease:
    """Perturbed query answers plus everything needed to interpret them.

    This is the only object derived from real data that downstream stages
    are allowed to see.
    """

    s_tilde: np.ndarray
    sigma_dp: float
    sensitivity: float
    budget: PrivacyBudget | None
    query_fingerprint: str
    n: int
    seed: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.s_tilde, dtype=np.float64).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "s_tilde", arr)

    def to_json(self) -> dict:
        return {
            "s_tilde": self.s_tilde.tolist(),
            "sigma_dp": self.sigma_dp,
            "epsilon": self.budget.epsilon if self.budget else None,
            "delta": self.budget.delta if self.budget else None,
            "sensitivity": self.sensitivity,
            "query_fingerprint": self.query_fingerprint,
            "n": self.n,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NoisyRelease":
        return cls(
            s_tilde=np.asarray(obj["s_tilde"], dtype=np.float64),
            sigma_dp=float(obj["sigma_dp"]),
            sensitivity=float(obj["sensitivity"]),
            budget=(
                PrivacyBudget(float(obj["epsilon"]), float(obj["delta"]))
                if obj.get("epsilon") is not None
                else None
            ),
            query_fingerprint=obj["query_fingerprint"],
            n=int(obj["n"]),
            seed=obj.get("seed"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "NoisyRelease":
        return cls.from_json(json.loads(Path(path).read_text()))


def gaussian_mechanism(
    s,
    sigma: float,
    rng_seed=None,
    *,
    budget: PrivacyBudget | None = None,
    sensitivity: float = float("nan"),
    query_fingerprint: str = "",
    n: int | None = None,
) -> NoisyRelease:
    """Add iid N(0, sigma^2) noise to each coordinate of ``s``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    s = np.asarray(s, dtype=np.float64)
    rng = as_generator(rng_seed)
    noisy = s + sigma * rng.standard_normal(s.shape)
    return NoisyRelease(
        s_tilde=noisy,
        sigma_dp=float(sigma),
        sensitivity=float(sensitivity),
        budget=budget,
        query_fingerprint=query_fingerprint,
        n=int(n) if n is not None else -1,
        seed=seed_to_int(rng_seed) if not isinstance(rng_seed, np.random.Generator) else None,
    )
