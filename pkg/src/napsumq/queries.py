"""Marginal queries: evaluation, full sets, sensitivity and canonical pruning."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from napsumq.schema import Dataset, Schema, SchemaError


class QueryError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class MarginalQuery:
    """Indicator that a row restricted to ``scope`` equals ``value``."""

    scope: tuple[int, ...]
    value: tuple[int, ...]

    def __post_init__(self):
        if not self.scope:
            raise QueryError("marginal query scope must be non-empty")
        if any(b <= a for a, b in zip(self.scope, self.scope[1:])):
            raise QueryError(f"scope {self.scope} must be strictly increasing")
        if len(self.value) != len(self.scope):
            raise QueryError("value and scope lengths differ")

    def check(self, schema: Schema) -> None:
        for var, val in zip(self.scope, self.value):
            if not 0 <= var < schema.d:
                raise QueryError(f"variable index {var} outside schema of {schema.d}")
            if not 0 <= val < schema.cardinalities[var]:
                raise QueryError(
                    f"value {val} outside cardinality of variable {schema.names[var]!r}"
                )

    def __call__(self, x) -> int:
        return int(all(x[v] == c for v, c in zip(self.scope, self.value)))


class QueryCollection:
    """Ordered concatenation of marginal queries over one schema.

    ``full_set_scopes`` lists the scopes that entered as complete sets of
    marginals. It survives canonicalisation, which is what keeps the
    sensitivity bound and idempotence well defined.
    """

    def __init__(
        self,
        schema: Schema,
        queries: Sequence[MarginalQuery],
        full_set_scopes: Sequence[Sequence[int]] = (),
        canonical: bool = False,
    ):
        self.schema = schema
        self.queries = tuple(queries)
        self.full_set_scopes = tuple(tuple(int(i) for i in s) for s in full_set_scopes)
        self.canonical = bool(canonical)
        for q in self.queries:
            q.check(schema)
        self._groups = self._build_groups()

    # scope -> (query indices, lookup table from flat scope index to query index)
    def _build_groups(self):
        groups: dict[tuple[int, ...], tuple[list[int], np.ndarray]] = {}
        cards = self.schema.cardinalities
        for j, q in enumerate(self.queries):
            if q.scope not in groups:
                size = math.prod(cards[v] for v in q.scope)
                groups[q.scope] = ([], np.full(size, -1, dtype=np.int64))
            idx, table = groups[q.scope]
            flat = np.ravel_multi_index(q.value, [cards[v] for v in q.scope])
            if table[flat] >= 0:
                raise QueryError(f"duplicate query {q}")
            table[flat] = j
            idx.append(j)
        return groups

    def __len__(self):
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def __getitem__(self, i):
        return self.queries[i]

    def __eq__(self, other):
        return (
            isinstance(other, QueryCollection)
            and self.queries == other.queries
            and self.full_set_scopes == other.full_set_scopes
            and self.canonical == other.canonical
            and self.schema == other.schema
        )

    def __repr__(self):
        return (
            f"QueryCollection(n_q={len(self)}, n_s={self.n_full_sets}, "
            f"canonical={self.canonical})"
        )

    @property
    def n_full_sets(self) -> int:
        return len(self.full_set_scopes)

    @property
    def scopes(self) -> list[tuple[int, ...]]:
        """Distinct query scopes in first-appearance order."""
        return list(self._groups)

    def __add__(self, other: "QueryCollection") -> "QueryCollection":
        if other.schema != self.schema:
            raise QueryError("cannot concatenate collections over different schemas")
        if self.canonical or other.canonical:
            raise QueryError("concatenate before canonicalising")
        return QueryCollection(
            self.schema,
            self.queries + other.queries,
            self.full_set_scopes + other.full_set_scopes,
        )

    def features(self, rows) -> np.ndarray:
        """0/1 matrix of shape ``(n, n_q)``: row i is the evaluation of row i."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.ndim == 1:
            rows = rows[None, :]
        out = np.zeros((rows.shape[0], len(self)), dtype=np.float64)
        cards = self.schema.cardinalities
        ar = np.arange(rows.shape[0])
        for scope, (_, table) in self._groups.items():
            flat = np.ravel_multi_index(rows[:, scope].T, [cards[v] for v in scope])
            j = table[flat]
            hit = j >= 0
            out[ar[hit], j[hit]] = 1.0
        return out

    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "schema": self.schema.to_json(),
                "queries": [[list(q.scope), list(q.value)] for q in self.queries],
                "full_sets": [list(s) for s in self.full_set_scopes],
                "canonical": self.canonical,
            },
            sort_keys=True,
        ).encode()
        return hashlib.sha256(payload).hexdigest()

    def to_json(self) -> dict:
        return {
            "queries": [[list(q.scope), list(q.value)] for q in self.queries],
            "full_set_scopes": [list(s) for s in self.full_set_scopes],
            "canonical": self.canonical,
        }

    @classmethod
    def from_json(cls, obj: dict, schema: Schema) -> "QueryCollection":
        queries = [MarginalQuery(tuple(s), tuple(v)) for s, v in obj["queries"]]
        return cls(schema, queries, obj.get("full_set_scopes", ()), obj.get("canonical", False))


def _normalize_scope(schema: Schema, scope: Iterable) -> tuple[int, ...]:
    idx = []
    for v in scope:
        idx.append(schema.index(v) if isinstance(v, str) else int(v))
    if not idx:
        raise QueryError("scope must be non-empty")
    if len(set(idx)) != len(idx):
        raise QueryError(f"repeated variable in scope {list(scope)}")
    for i in idx:
        if not 0 <= i < schema.d:
            raise QueryError(f"variable index {i} outside schema of {schema.d}")
    return tuple(sorted(idx))


def full_marginal_set(schema: Schema, scope: Iterable) -> QueryCollection:
    """All joint values of the scoped variables, in lexicographic code order."""
    scope = _normalize_scope(schema, scope)
    ranges = [range(schema.cardinalities[v]) for v in scope]
    queries = [MarginalQuery(scope, tuple(v)) for v in itertools.product(*ranges)]
    return QueryCollection(schema, queries, [scope])


def full_marginal_sets(schema: Schema, scopes: Iterable[Iterable]) -> QueryCollection:
    scopes = list(scopes)
    if not scopes:
        raise QueryError("need at least one scope")
    qc = full_marginal_set(schema, scopes[0])
    for s in scopes[1:]:
        qc = qc + full_marginal_set(schema, s)
    return qc


def load_query_spec(path, schema: Schema) -> QueryCollection:
    """Read a JSON list of scopes (variable names) into full marginal sets."""
    with open(path, encoding="utf-8") as fh:
        scopes = json.load(fh)
    try:
        return full_marginal_sets(schema, scopes)
    except SchemaError as exc:
        raise QueryError(str(exc)) from exc


def evaluate(qc: QueryCollection, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    if x.shape != (qc.schema.d,):
        raise QueryError(f"row must have {qc.schema.d} entries")
    return qc.features(x)[0].astype(np.int64)


def evaluate_dataset(qc: QueryCollection, data: Dataset) -> np.ndarray:
    """Count vector ``s``: the sum of per-row evaluations."""
    if data.schema != qc.schema:
        raise QueryError("dataset schema does not match query schema")
    rows = data.rows
    s = np.zeros(len(qc), dtype=np.int64)
    cards = qc.schema.cardinalities
    for scope, (_, table) in qc._groups.items():
        dims = [cards[v] for v in scope]
        if rows.shape[0]:
            flat = np.ravel_multi_index(rows[:, scope].T, dims)
            counts = np.bincount(flat, minlength=table.size)
        else:
            counts = np.zeros(table.size, dtype=np.int64)
        hit = table >= 0
        s[table[hit]] = counts[hit]
    return s


def sensitivity(qc: QueryCollection) -> float:
    """L2 sensitivity bound sqrt(2 n_s) under the substitute-one-row relation.

    For canonical collections this is the bound of the collection they were
    pruned from, which upper-bounds the pruned one.
    """
    if not qc.full_set_scopes:
        raise QueryError("sensitivity is only defined for collections built from full sets")
    if not qc.canonical:
        expected = sum(
            math.prod(qc.schema.cardinalities[v] for v in s) for s in qc.full_set_scopes
        )
        if expected != len(qc):
            raise QueryError("collection is not an intact concatenation of full sets")
    return math.sqrt(2 * qc.n_full_sets)


def _nonempty_subsets(scope: tuple[int, ...]):
    for r in range(1, len(scope) + 1):
        yield from itertools.combinations(scope, r)


def canonicalize(qc: QueryCollection, schema: Schema | None = None) -> QueryCollection:
    """Prune linearly dependent queries via the canonical parametrisation.

    The reference assignment is all zeros. Every non-empty subset D of an
    input scope contributes the canonical queries over D whose values are all
    non-reference. Each such query is the sum of the original-scope queries
    that agree with it on D, so it is replaced by those; D is always resolved
    inside the first input scope containing it. Duplicates collapse into one
    parameter. The survivors are a subset of the original queries, ordered by
    scope then value.
    """
    schema = schema or qc.schema
    if schema != qc.schema:
        raise QueryError("schema does not match the collection")
    if not qc.full_set_scopes:
        raise QueryError("canonicalize needs a collection built from full sets")
    cards = schema.cardinalities

    owner: dict[tuple[int, ...], int] = {}
    for c, scope in enumerate(qc.full_set_scopes):
        for sub in _nonempty_subsets(scope):
            owner.setdefault(sub, c)
    n_canonical = sum(math.prod(cards[v] - 1 for v in sub) for sub in owner)

    keep: list[set[tuple[int, ...]]] = [set() for _ in qc.full_set_scopes]
    for sub, c in owner.items():
        scope = qc.full_set_scopes[c]
        pos = [scope.index(v) for v in sub]
        for value in itertools.product(*[range(cards[v]) for v in scope]):
            if all(value[p] != 0 for p in pos):
                keep[c].add(value)

    queries = []
    seen = set()
    for c, scope in enumerate(qc.full_set_scopes):
        for value in sorted(keep[c]):
            q = MarginalQuery(scope, value)
            if q not in seen:
                seen.add(q)
                queries.append(q)
    if len(queries) != n_canonical:
        raise QueryError(
            f"canonical pruning left {len(queries)} queries for {n_canonical} canonical "
            "parameters; parameter tying would be required and is not supported"
        )
    return QueryCollection(schema, queries, qc.full_set_scopes, canonical=True)
