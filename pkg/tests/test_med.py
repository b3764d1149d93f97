import math

import numpy as np
import pytest
from scipy import stats

from napsumq.med import MEDFamily, MEDModel, TreeWidthError, fit_pgm_mle, min_fill_order
from napsumq.privacy import gaussian_mechanism
from napsumq.queries import canonicalize, evaluate_dataset, full_marginal_sets
from napsumq.schema import Schema, SchemaError, sample_toy_data, toy_schema

from conftest import random_schema_and_scopes


def _families(schema, scopes, canonical=True):
    qc = full_marginal_sets(schema, scopes)
    if canonical:
        qc = canonicalize(qc)
    return MEDFamily(qc, "enumeration"), MEDFamily(qc, "junction_tree")


def _central_diff(f, x, h=1e-5):
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def test_min_fill_order_chain_and_cycle():
    order, width = min_fill_order(4, [(0, 1), (1, 2), (2, 3)], range(4))
    assert width == 1 and sorted(order) == [0, 1, 2, 3]
    _, width = min_fill_order(4, [(0, 1), (1, 2), (2, 3), (0, 3)], range(4))
    assert width == 2
    order, _ = min_fill_order(3, [], range(3))
    assert order == [0, 1, 2]


def test_backends_agree_on_random_schemas():
    rng = np.random.default_rng(1)
    for _ in range(15):
        schema, scopes = random_schema_and_scopes(rng)
        for canonical in (True, False):
            en, jt = _families(schema, scopes, canonical)
            theta = rng.normal(0, 1.5, en.n_params)
            assert jt.log_partition(theta) == pytest.approx(en.log_partition(theta), rel=1e-10)
            me, mj = en.moments(theta), jt.moments(theta)
            np.testing.assert_allclose(mj.mu, me.mu, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(mj.sigma, me.sigma, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(
                jt.third_cumulant(theta), en.third_cumulant(theta), rtol=1e-8, atol=1e-12
            )
            for scope in scopes:
                np.testing.assert_allclose(
                    jt.marginal(theta, scope), en.marginal(theta, scope), rtol=1e-9, atol=1e-14
                )


def test_uncovered_variable_counts_in_partition():
    schema = Schema.from_cardinalities([2, 3, 2])
    en, jt = _families(schema, [(0,)])
    theta = np.array([0.7])
    expected = math.log(3 * 2 * (1 + math.exp(0.7)))
    assert en.log_partition(theta) == pytest.approx(expected, rel=1e-12)
    assert jt.log_partition(theta) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("backend", ["enumeration", "junction_tree"])
def test_derivative_identities(backend):
    schema = Schema.from_cardinalities([2, 3, 2, 2])
    qc = canonicalize(full_marginal_sets(schema, [(0, 1), (1, 2), (2, 3)]))
    fam = MEDFamily(qc, backend)
    theta = np.random.default_rng(2).normal(0, 1, fam.n_params)
    m = fam.moments(theta)
    np.testing.assert_allclose(_central_diff(fam.log_partition, theta), m.mu, atol=1e-8)
    np.testing.assert_allclose(
        _central_diff(lambda t: fam.moments(t).mu, theta), m.sigma, atol=1e-8
    )
    kappa = fam.third_cumulant(theta)
    np.testing.assert_allclose(
        _central_diff(lambda t: fam.moments(t).sigma, theta), kappa, atol=1e-7
    )
    assert np.all(np.linalg.eigvalsh(m.sigma) > 0)


def test_marginals_sum_to_one_and_are_consistent():
    schema = Schema.from_cardinalities([3, 2, 2])
    en, jt = _families(schema, [(0, 1), (1, 2)])
    theta = np.linspace(-1, 1, en.n_params)
    for fam in (en, jt):
        p01 = fam.marginal(theta, [0, 1])
        assert p01.shape == (3, 2)
        assert p01.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(p01.sum(axis=0), fam.marginal(theta, [1]), atol=1e-12)


@pytest.mark.parametrize("backend", ["enumeration", "junction_tree"])
def test_sampling_frequencies(backend):
    schema = Schema.from_cardinalities([2, 3, 2])
    qc = canonicalize(full_marginal_sets(schema, [(0, 1), (1, 2)]))
    fam = MEDFamily(qc, backend)
    theta = np.random.default_rng(5).normal(0, 1, fam.n_params)
    data = fam.sample(theta, 60_000, 9)
    probs = fam.marginal(theta, [0, 1, 2]).ravel()
    flat = np.ravel_multi_index(data.rows.T, schema.cardinalities)
    observed = np.bincount(flat, minlength=probs.size)
    _, pval = stats.chisquare(observed, probs * data.n)
    assert pval > 1e-3
    assert np.array_equal(fam.sample(theta, 100, 4).rows, fam.sample(theta, 100, 4).rows)
    assert fam.sample(theta, 0).n == 0


def test_width_gate_and_enumeration_cap():
    schema = Schema.from_cardinalities([2] * 6)
    scopes = [(i, j) for i in range(6) for j in range(i + 1, 6)]
    qc = full_marginal_sets(schema, scopes)
    with pytest.raises(TreeWidthError):
        MEDFamily(qc, "junction_tree", max_width=3)
    assert MEDFamily(qc, "junction_tree").width == 5
    with pytest.raises(SchemaError):
        MEDFamily(qc, "enumeration", enumeration_cap=10)
    assert MEDFamily(qc, enumeration_cap=10).backend == "junction_tree"


def test_theta_validation():
    fam = MEDFamily(canonicalize(full_marginal_sets(toy_schema(), [[0, 1, 2]])))
    with pytest.raises(ValueError):
        fam.log_partition(np.zeros(3))
    with pytest.raises(ValueError):
        fam.log_partition(np.full(7, np.nan))


def test_model_json_round_trip(tmp_path):
    qc = canonicalize(full_marginal_sets(toy_schema(), [[0, 1, 2]]))
    model = MEDModel(qc, np.arange(7) / 10)
    back = MEDModel.from_json(model.to_json())
    assert back.log_partition() == pytest.approx(model.log_partition(), rel=1e-15)
    model.save(tmp_path / "m.json")
    obj = model.to_json()
    obj["schema_digest"] = "0" * 16
    with pytest.raises(SchemaError):
        MEDModel.from_json(obj)


@pytest.mark.parametrize("canonical", [True, False])
def test_pgm_fit_matches_noiseless_counts(canonical):
    data = sample_toy_data(5000, 3)
    qc = full_marginal_sets(toy_schema(), [[0, 1, 2]])
    if canonical:
        qc = canonicalize(qc)
    counts = evaluate_dataset(qc, data)
    release = gaussian_mechanism(
        counts, 1e-9, 0, query_fingerprint=qc.fingerprint(), n=data.n
    )
    model = fit_pgm_mle(release, qc)
    np.testing.assert_allclose(data.n * model.moments().mu, counts, atol=0.05)


def test_pgm_fit_rejects_foreign_release():
    qc = canonicalize(full_marginal_sets(toy_schema(), [[0, 1, 2]]))
    release = gaussian_mechanism(np.zeros(7), 1.0, 0, query_fingerprint="other", n=10)
    with pytest.raises(ValueError):
        fit_pgm_mle(release, qc)
