import itertools
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from napsumq.queries import (
    MarginalQuery,
    QueryCollection,
    QueryError,
    canonicalize,
    evaluate,
    evaluate_dataset,
    full_marginal_set,
    full_marginal_sets,
    sensitivity,
)
from napsumq.schema import Dataset, Schema, toy_schema

from conftest import random_schema_and_scopes


@st.composite
def schema_and_scopes(draw):
    d = draw(st.integers(2, 5))
    cards = draw(st.lists(st.integers(2, 3), min_size=d, max_size=d))
    scopes = draw(
        st.lists(
            st.lists(st.integers(0, d - 1), min_size=1, max_size=3, unique=True).map(
                lambda s: tuple(sorted(s))
            ),
            min_size=1,
            max_size=4,
            unique=True,
        )
    )
    return Schema.from_cardinalities(cards), scopes


def _rank(M):
    return np.linalg.matrix_rank(M, tol=1e-9)


def test_marginal_query_validation():
    with pytest.raises(QueryError):
        MarginalQuery((1, 0), (0, 0))
    with pytest.raises(QueryError):
        MarginalQuery((), ())
    with pytest.raises(QueryError):
        MarginalQuery((0,), (0, 1))
    q = MarginalQuery((0, 2), (1, 0))
    assert q(np.array([1, 1, 0])) == 1
    assert q(np.array([1, 1, 1])) == 0
    with pytest.raises(QueryError):
        MarginalQuery((0,), (5,)).check(toy_schema())


def test_full_set_order_and_names():
    schema = Schema.from_cardinalities([2, 3], names=["a", "b"])
    qc = full_marginal_set(schema, ["b", "a"])
    assert [q.value for q in qc] == list(itertools.product(range(2), range(3)))
    assert qc == full_marginal_set(schema, [0, 1])
    with pytest.raises(QueryError):
        full_marginal_set(schema, ["a", "a"])


def test_duplicate_queries_rejected():
    schema = toy_schema()
    q = MarginalQuery((0,), (1,))
    with pytest.raises(QueryError):
        QueryCollection(schema, [q, q])


@settings(max_examples=40, deadline=None)
@given(schema_and_scopes(), st.integers(0, 2**31))
def test_full_sets_are_one_hot(ss, seed):
    schema, scopes = ss
    qc = full_marginal_sets(schema, scopes)
    rng = np.random.default_rng(seed)
    rows = np.column_stack([rng.integers(0, k, 20) for k in schema.cardinalities])
    F = qc.features(rows)
    start = 0
    for scope in scopes:
        size = math.prod(schema.cardinalities[v] for v in scope)
        assert np.all(F[:, start : start + size].sum(axis=1) == 1)
        start += size
    data = Dataset(schema, rows)
    assert np.array_equal(evaluate_dataset(qc, data), F.sum(axis=0).astype(int))
    assert np.array_equal(evaluate(qc, rows[0]), F[0].astype(int))


def test_sensitivity_value_and_errors():
    schema = Schema.from_cardinalities([2, 3, 2])
    qc = full_marginal_sets(schema, [(0, 1), (1, 2), (0, 2)])
    assert sensitivity(qc) == pytest.approx(math.sqrt(6))
    assert sensitivity(canonicalize(qc)) == sensitivity(qc)
    partial = QueryCollection(schema, list(qc)[:3], qc.full_set_scopes)
    with pytest.raises(QueryError):
        sensitivity(partial)


@settings(max_examples=30, deadline=None)
@given(schema_and_scopes(), st.integers(0, 2**31))
def test_sensitivity_bounds_every_substitution(ss, seed):
    schema, scopes = ss
    qc = full_marginal_sets(schema, scopes)
    bound = sensitivity(qc)
    canon = canonicalize(qc)
    rng = np.random.default_rng(seed)
    for _ in range(50):
        x, y = (np.array([rng.integers(0, k) for k in schema.cardinalities]) for _ in range(2))
        assert np.linalg.norm(qc.features(x) - qc.features(y)) <= bound + 1e-12
        assert np.linalg.norm(canon.features(x) - canon.features(y)) <= bound + 1e-12


def test_toy_canonical_queries():
    qc = full_marginal_sets(toy_schema(), [["x1", "x2", "x3"]])
    canon = canonicalize(qc)
    assert len(qc) == 8 and len(canon) == 7
    assert all(q.value != (0, 0, 0) for q in canon)


def _check_canonical(schema, scopes):
    qc = full_marginal_sets(schema, scopes)
    canon = canonicalize(qc)
    expected = sum(
        math.prod(schema.cardinalities[v] - 1 for v in sub)
        for sub in {s for scope in qc.full_set_scopes for r in range(1, len(scope) + 1)
                    for s in itertools.combinations(scope, r)}
    )
    assert len(canon) == expected
    dom = schema.enumerate_domain()
    one = np.ones((len(dom), 1))
    Fc = np.hstack([canon.features(dom), one])
    Fo = np.hstack([qc.features(dom), one])
    assert _rank(Fc) == Fc.shape[1]
    assert _rank(Fo) == _rank(Fc) == _rank(np.hstack([Fo, Fc]))
    assert canonicalize(canon) == canon
    assert set(canon) <= set(qc)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(schema_and_scopes())
def test_canonical_identifiable_property(ss):
    _check_canonical(*ss)


def test_canonical_on_random_schemas():
    rng = np.random.default_rng(0)
    for _ in range(20):
        _check_canonical(*random_schema_and_scopes(rng))


def test_query_json_and_fingerprint():
    schema = Schema.from_cardinalities([2, 3, 2])
    canon = canonicalize(full_marginal_sets(schema, [(0, 1), (1, 2)]))
    back = QueryCollection.from_json(canon.to_json(), schema)
    assert back == canon and back.canonical
    assert back.fingerprint() == canon.fingerprint()
    other = full_marginal_sets(schema, [(0, 1), (1, 2)])
    assert other.fingerprint() != canon.fingerprint()


def test_concatenation():
    schema = toy_schema()
    a = full_marginal_set(schema, [0])
    b = full_marginal_set(schema, [1, 2])
    ab = a + b
    assert len(ab) == 6 and ab.n_full_sets == 2
    with pytest.raises(QueryError):
        canonicalize(a) + b
