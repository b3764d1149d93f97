"""Maximum-entropy log-linear distribution over the query features.

``P(x) = exp(theta . a(x) - logZ(theta))`` with ``a`` a collection of
marginal queries. Two interchangeable backends compute the log-partition
function, the moments of ``a(x)`` and samples:

* ``enumeration`` materialises the ``|X| x n_q`` feature matrix; exact and
  fast for small domains, and the oracle for the other backend.
* ``junction_tree`` runs variable elimination over the Markov network that
  the query scopes induce; cost is exponential in the induced width only.

``MEDFamily`` holds the theta-free structure and evaluates everything as a
function of theta; ``MEDModel`` pins a theta.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from napsumq._random import as_generator
from napsumq.privacy import NoisyRelease
from napsumq.queries import QueryCollection
from napsumq.schema import DEFAULT_ENUMERATION_CAP, Dataset, Schema, SchemaError


class TreeWidthError(RuntimeError):
    pass


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class MomentPair:
    mu: np.ndarray
    sigma: np.ndarray


# -- variable elimination ----------------------------------------------------


def _interaction_graph(d: int, scopes) -> list[set[int]]:
    adj = [set() for _ in range(d)]
    for scope in scopes:
        for u, v in itertools.combinations(scope, 2):
            adj[u].add(v)
            adj[v].add(u)
    return adj


def min_fill_order(d: int, scopes, eliminate) -> tuple[list[int], int]:
    """Greedy min-fill elimination order over ``eliminate``; ties by index.

    Returns the order and the induced width (largest eliminated clique - 1).
    """
    adj = _interaction_graph(d, scopes)
    remaining = sorted(eliminate)
    order, width = [], 0
    while remaining:
        best, best_fill = None, None
        for v in remaining:
            nb = list(adj[v])
            fill = sum(1 for a, b in itertools.combinations(nb, 2) if b not in adj[a])
            if best_fill is None or fill < best_fill:
                best, best_fill = v, fill
        nb = adj[best]
        width = max(width, len(nb))
        for a, b in itertools.combinations(nb, 2):
            adj[a].add(b)
            adj[b].add(a)
        for u in nb:
            adj[u].discard(best)
        adj[best] = set()
        remaining.remove(best)
        order.append(best)
    return order, width


class _Factor:
    __slots__ = ("vars", "table")

    def __init__(self, vars_: tuple[int, ...], table: np.ndarray):
        self.vars = vars_
        self.table = table


def _expand(f: _Factor, target: tuple[int, ...]) -> np.ndarray:
    shape = [f.table.shape[f.vars.index(v)] if v in f.vars else 1 for v in target]
    return f.table.reshape(shape)


def _combine(factors: list[_Factor]) -> _Factor:
    target = tuple(sorted(set().union(*[f.vars for f in factors])))
    total = 0.0
    for f in factors:
        total = total + _expand(f, target)
    cards = [None] * len(target)
    for f in factors:
        for v, k in zip(f.vars, f.table.shape):
            cards[target.index(v)] = k
    return _Factor(target, np.broadcast_to(total, cards).copy())


def _eliminate(factors: list[_Factor], order, record: bool = False):
    factors = list(factors)
    steps = []
    for v in order:
        touching = [f for f in factors if v in f.vars]
        if not touching:
            continue
        factors = [f for f in factors if v not in f.vars]
        joint = _combine(touching)
        if record:
            steps.append((v, joint))
        axis = joint.vars.index(v)
        rest = joint.vars[:axis] + joint.vars[axis + 1 :]
        factors.append(_Factor(rest, logsumexp(joint.table, axis=axis)))
    return factors, steps


# -- family ------------------------------------------------------------------


class MEDFamily:
    """Theta-free structure of the log-linear model for a query collection."""

    def __init__(
        self,
        queries: QueryCollection,
        backend: str = "auto",
        enumeration_cap: int = DEFAULT_ENUMERATION_CAP,
        max_width: int = 16,
    ):
        if backend not in ("auto", "enumeration", "junction_tree"):
            raise ValueError(f"unknown backend {backend!r}")
        self.queries = queries
        self.schema: Schema = queries.schema
        self.enumeration_cap = enumeration_cap
        self.max_width = max_width
        if backend == "auto":
            backend = (
                "enumeration" if self.schema.domain_size <= enumeration_cap else "junction_tree"
            )
        if backend == "enumeration" and self.schema.domain_size > enumeration_cap:
            raise SchemaError(
                f"domain of {self.schema.domain_size} cells exceeds enumeration cap "
                f"{enumeration_cap}; use the junction_tree backend"
            )
        self.backend = backend
        if backend == "junction_tree":
            self.elimination_order, self.width = min_fill_order(
                self.schema.d, queries.scopes, range(self.schema.d)
            )
            if self.width > max_width:
                raise TreeWidthError(
                    f"induced width {self.width} exceeds the limit {max_width}"
                )
        self._orders: dict[tuple[int, ...], list[int]] = {}

    @property
    def n_params(self) -> int:
        return len(self.queries)

    # enumeration helpers
    @cached_property
    def domain(self) -> np.ndarray:
        return self.schema.enumerate_domain(self.enumeration_cap)

    @cached_property
    def feature_matrix(self) -> np.ndarray:
        return self.queries.features(self.domain)

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"theta must have shape ({self.n_params},), got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        return theta

    def log_probs(self, theta) -> np.ndarray:
        """Log-probability of every domain point (enumeration only)."""
        theta = self._check(theta)
        scores = self.feature_matrix @ theta
        top = scores.max()
        return scores - (top + np.log(np.exp(scores - top).sum()))

    # junction-tree helpers
    def _factors(self, theta) -> list[_Factor]:
        cards = self.schema.cardinalities
        out = []
        for scope, (idx, table) in self.queries._groups.items():
            logt = np.zeros(table.size)
            hit = table >= 0
            logt[hit] = theta[table[hit]]
            out.append(_Factor(scope, logt.reshape([cards[v] for v in scope])))
        # unit factors keep variables outside every scope in the model
        covered = set().union(*[set(s) for s in self.queries.scopes]) if out else set()
        for v in range(self.schema.d):
            if v not in covered:
                out.append(_Factor((v,), np.zeros(cards[v])))
        return out

    def _order_for(self, keep: tuple[int, ...]) -> list[int]:
        if keep not in self._orders:
            drop = [v for v in range(self.schema.d) if v not in keep]
            order, _ = min_fill_order(self.schema.d, self.queries.scopes, drop)
            self._orders[keep] = order
        return self._orders[keep]

    def _unnormalised_marginal(self, theta, keep: tuple[int, ...]) -> np.ndarray:
        factors, _ = _eliminate(self._factors(theta), self._order_for(keep))
        cards = self.schema.cardinalities
        if not keep:
            return np.asarray(sum(float(f.table) for f in factors))
        joint = _combine(factors + [_Factor((v,), np.zeros(cards[v])) for v in keep])
        # scalar leftovers broadcast in _combine; joint.vars == keep
        return joint.table

    # public API
    def log_partition(self, theta) -> float:
        theta = self._check(theta)
        if self.backend == "enumeration":
            return float(logsumexp(self.feature_matrix @ theta))
        return float(self._unnormalised_marginal(theta, ()))

    def marginal(self, theta, variables) -> np.ndarray:
        """Probability table over ``variables`` (axes in sorted index order)."""
        theta = self._check(theta)
        keep = tuple(sorted(set(int(v) for v in variables)))
        cards = self.schema.cardinalities
        if self.backend == "enumeration":
            p = np.exp(self.log_probs(theta))
            shape = [cards[v] for v in keep]
            if not keep:
                return np.asarray(p.sum())
            flat = np.ravel_multi_index(self.domain[:, keep].T, shape)
            return np.bincount(flat, weights=p, minlength=math.prod(shape)).reshape(shape)
        logz = self.log_partition(theta)
        return np.exp(self._unnormalised_marginal(theta, keep) - logz)

    def _union_moments(self, theta, order: int) -> np.ndarray:
        """Raw moments E[a_j a_k (a_l)] from marginals over merged scopes."""
        scopes = self.queries.scopes
        q_scope = [q.scope for q in self.queries]
        unions = set()
        for combo in itertools.combinations_with_replacement(range(len(scopes)), order):
            unions.add(frozenset().union(*[scopes[i] for i in combo]))
        maximal = [u for u in unions if not any(u < w for w in unions)]
        k = self.n_params
        out = np.zeros((k,) * order)
        done = np.zeros((k,) * order, dtype=bool)
        logz = self.log_partition(theta)
        cards = self.schema.cardinalities
        for u in sorted(maximal, key=lambda s: sorted(s)):
            keep = tuple(sorted(u))
            p = np.exp(self._unnormalised_marginal(theta, keep) - logz).ravel()
            inside = [j for j in range(k) if set(q_scope[j]) <= u]
            pts = np.indices([cards[v] for v in keep]).reshape(len(keep), -1).T
            masks = np.ones((pts.shape[0], len(inside)))
            for c, j in enumerate(inside):
                q = self.queries[j]
                for var, val in zip(q.scope, q.value):
                    masks[:, c] *= pts[:, keep.index(var)] == val
            if order == 2:
                block = np.einsum("x,xj,xk->jk", p, masks, masks)
            else:
                block = np.einsum("x,xj,xk,xl->jkl", p, masks, masks, masks)
            ix = np.ix_(*([inside] * order))
            out[ix] = np.where(done[ix], out[ix], block)
            done[ix] = True
        return out

    def moments(self, theta) -> MomentPair:
        theta = self._check(theta)
        if self.backend == "enumeration":
            p = np.exp(self.log_probs(theta))
            F = self.feature_matrix
            mu = F.T @ p
            second = (F * p[:, None]).T @ F
        else:
            second = self._union_moments(theta, 2)
            mu = np.diag(second).copy()
        sigma = second - np.outer(mu, mu)
        sigma = 0.5 * (sigma + sigma.T)
        return MomentPair(mu, sigma)

    def third_cumulant(self, theta) -> np.ndarray:
        """kappa_jkl = E[(a_j - mu_j)(a_k - mu_k)(a_l - mu_l)], the derivative of Sigma."""
        theta = self._check(theta)
        if self.backend == "enumeration":
            p = np.exp(self.log_probs(theta))
            F = self.feature_matrix
            C = F - F.T @ p
            return np.einsum("x,xj,xk,xl->jkl", p, C, C, C)
        third = self._union_moments(theta, 3)
        m = self.moments(theta)
        mu = m.mu
        second = m.sigma + np.outer(mu, mu)
        return (
            third
            - np.einsum("j,kl->jkl", mu, second)
            - np.einsum("k,jl->jkl", mu, second)
            - np.einsum("l,jk->jkl", mu, second)
            + 2.0 * np.einsum("j,k,l->jkl", mu, mu, mu)
        )

    def sample(self, theta, n_rows: int, rng_seed=None) -> Dataset:
        theta = self._check(theta)
        rng = as_generator(rng_seed)
        if n_rows == 0:
            return Dataset(self.schema, np.zeros((0, self.schema.d), dtype=np.int64))
        if self.backend == "enumeration":
            p = np.exp(self.log_probs(theta))
            cells = rng.choice(p.size, size=n_rows, p=p / p.sum())
            return Dataset(self.schema, self.domain[cells], validate=False)
        return Dataset(self.schema, self._backward_sample(theta, n_rows, rng), validate=False)

    def _backward_sample(self, theta, n_rows, rng) -> np.ndarray:
        # Eliminating in order pi gives P(x) = prod_t P(x_t | vars eliminated
        # after t), each conditional proportional to the step's joint factor.
        _, steps = _eliminate(self._factors(theta), self.elimination_order, record=True)
        rows = np.zeros((n_rows, self.schema.d), dtype=np.int64)
        for v, joint in reversed(steps):
            axis = joint.vars.index(v)
            table = np.moveaxis(joint.table, axis, -1)
            others = [u for u in joint.vars if u != v]
            if others:
                logits = table[tuple(rows[:, u] for u in others)]
            else:
                logits = np.broadcast_to(table, (n_rows, table.shape[-1]))
            logits = logits - logits.max(axis=1, keepdims=True)
            prob = np.exp(logits)
            cum = np.cumsum(prob, axis=1)
            u = rng.random(n_rows) * cum[:, -1]
            rows[:, v] = np.minimum((u[:, None] > cum).sum(axis=1), table.shape[-1] - 1)
        return rows


class MEDModel:
    """A maximum-entropy distribution with fixed parameters."""

    def __init__(self, queries: QueryCollection, theta, backend: str = "auto", **family_kw):
        if isinstance(queries, MEDFamily):
            self.family = queries
        else:
            self.family = MEDFamily(queries, backend=backend, **family_kw)
        self.theta = self.family._check(theta).copy()
        self.theta.setflags(write=False)

    @property
    def queries(self) -> QueryCollection:
        return self.family.queries

    @property
    def schema(self) -> Schema:
        return self.family.schema

    @property
    def backend(self) -> str:
        return self.family.backend

    def log_partition(self) -> float:
        return self.family.log_partition(self.theta)

    def moments(self) -> MomentPair:
        return self.family.moments(self.theta)

    def marginal(self, variables) -> np.ndarray:
        return self.family.marginal(self.theta, variables)

    def sample(self, n_rows: int, rng_seed=None) -> Dataset:
        return self.family.sample(self.theta, n_rows, rng_seed)

    def to_json(self) -> dict:
        return {
            "schema_digest": self.schema.digest(),
            "schema": self.schema.to_json(),
            "query_list": self.queries.to_json(),
            "theta": self.theta.tolist(),
            "backend": self.backend,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MEDModel":
        schema = Schema.from_json(obj["schema"])
        if schema.digest() != obj["schema_digest"]:
            raise SchemaError("schema digest mismatch")
        qc = QueryCollection.from_json(obj["query_list"], schema)
        return cls(qc, np.asarray(obj["theta"]), backend=obj["backend"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)


# module-level conveniences mirroring the model methods
def log_partition(model: MEDModel) -> float:
    return model.log_partition()


def moments(model: MEDModel) -> MomentPair:
    return model.moments()


def sample(model: MEDModel, n_rows: int, rng_seed=None) -> Dataset:
    return model.sample(n_rows, rng_seed)


def fit_pgm_mle(
    release: NoisyRelease,
    queries: QueryCollection,
    schema: Schema | None = None,
    *,
    backend: str = "auto",
    tol: float = 1e-8,
    max_iter: int = 5000,
    theta0=None,
) -> MEDModel:
    """Point estimate minimising ``||s_tilde - n mu(theta)||^2``.

    Gradient descent with Barzilai-Borwein trial steps and Armijo
    backtracking; the gradient is ``-2 n Sigma(theta) (s_tilde - n mu)``.
    Stops when the objective improves by less than ``tol`` or after
    ``max_iter`` iterations.
    """
    if schema is not None and schema != queries.schema:
        raise ValueError("schema does not match the queries")
    if release.query_fingerprint and release.query_fingerprint != queries.fingerprint():
        raise ValueError("release was not produced from these queries")
    family = queries if isinstance(queries, MEDFamily) else MEDFamily(queries, backend=backend)
    n = release.n
    if n <= 0:
        raise ValueError("release does not record the dataset size")
    target = release.s_tilde

    def objective(theta):
        m = family.moments(theta)
        r = target - n * m.mu
        return float(r @ r), -2.0 * n * (m.sigma @ r)

    theta = np.zeros(family.n_params) if theta0 is None else np.array(theta0, dtype=float)
    f, g = objective(theta)
    step = 1.0 / max(np.abs(g).max(), 1.0)
    prev_theta = prev_g = None
    for _ in range(max_iter):
        if prev_theta is not None:
            s, y = theta - prev_theta, g - prev_g
            sy = float(s @ y)
            if sy > 0:
                step = float(s @ s) / sy
        t = step
        while True:
            cand = theta - t * g
            if not np.all(np.isfinite(cand)):
                t *= 0.5
                continue
            f_new, g_new = objective(cand)
            if not math.isfinite(f_new):
                raise FitError("objective became non-finite")
            if f_new <= f - 1e-4 * t * float(g @ g) or t < 1e-20:
                break
            t *= 0.5
        prev_theta, prev_g = theta, g
        improvement = f - f_new
        theta, f, g = cand, f_new, g_new
        if improvement < tol:
            break
    return MEDModel(family, theta)
