import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from napsumq.mi_analysis import (
    AnalysisResult,
    CombineError,
    LogisticRegressionIRLS,
    combine,
    design_matrix,
    drop_outlier_variances,
    interval,
    logistic_fit,
    naive_interval,
    t_quantile,
)
from napsumq.schema import Dataset, Schema, sample_toy_data


def _results(qs, vs):
    return [AnalysisResult(np.atleast_1d(q), np.atleast_1d(v)) for q, v in zip(qs, vs)]


def t_quantile_reference(prob, nu, dps=40):
    """Invert the Student-t CDF written through the regularised incomplete beta."""
    with mpmath.workdps(dps):
        nu = mpmath.mpf(nu)

        def cdf(t):
            x = nu / (nu + t * t)
            tail = mpmath.betainc(nu / 2, mpmath.mpf(1) / 2, 0, x, regularized=True) / 2
            return 1 - tail if t > 0 else tail

        return float(mpmath.findroot(lambda t: cdf(t) - prob, mpmath.mpf(2)))


# -- Rubin's rules worked examples --------------------------------------------


def test_combine_basic_example():
    ce = combine(_results([1.0, 3.0], [1.0, 1.0]), n_syn=100, n=100)
    assert ce.q_bar[0] == 2.0
    assert ce.v_bar[0] == 1.0
    assert ce.b[0] == 2.0
    assert ce.T[0] == 2.0
    assert ce.T_star[0] == 2.0
    assert ce.r[0] == 3.0
    assert ce.nu[0] == pytest.approx(4 / 9, rel=1e-15)


def test_combine_negative_T_branch():
    ce = combine(_results([1.0, 1.0], [1.0, 1.0]), n_syn=100, n=100)
    assert ce.b[0] == 0.0
    assert ce.T[0] == -1.0
    assert ce.T_star[0] == 1.0
    ce = combine(_results([1.0, 1.0], [1.0, 1.0]), n_syn=50, n=100)
    assert ce.T_star[0] == 0.5


def test_combine_identical_results():
    ce = combine(_results([0.7] * 5, [0.2] * 5), n_syn=300, n=100)
    assert ce.q_bar[0] == pytest.approx(0.7, rel=1e-15)
    assert ce.b[0] == 0.0
    assert ce.T_star[0] == pytest.approx(3 * 0.2, rel=1e-15)
    assert math.isinf(ce.nu[0])


def test_combine_errors():
    with pytest.raises(CombineError):
        combine(_results([1.0], [1.0]), 10, 10)
    with pytest.raises(CombineError):
        combine(_results([1.0, 2.0], [0.0, 0.0]), 10, 10)
    with pytest.raises(CombineError):
        combine([AnalysisResult([1.0], [1.0]), AnalysisResult([1.0, 2.0], [1.0, 1.0])], 10, 10)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 3)), min_size=2, max_size=8),
    st.floats(-10, 10),
    st.randoms(use_true_random=False),
)
def test_combine_invariants(pairs, shift, rnd):
    qs, vs = map(list, zip(*pairs))
    ce = combine(_results(qs, vs), 100, 100)
    assert ce.T_star[0] >= 0 and ce.b[0] >= 0
    if ce.r[0] > 0 and ce.r[0] != 1.0:
        assert ce.nu[0] > 0
    if ce.r[0] == 1.0:
        # nu vanishes exactly where T = 0, so the interval is degenerate anyway
        assert abs(ce.T[0]) <= 1e-12 * ce.v_bar[0]
    order = list(range(len(qs)))
    rnd.shuffle(order)
    ce2 = combine(_results([qs[i] for i in order], [vs[i] for i in order]), 100, 100)
    assert ce2.q_bar[0] == pytest.approx(ce.q_bar[0], abs=1e-12)
    assert ce2.T_star[0] == pytest.approx(ce.T_star[0], rel=1e-9, abs=1e-12)
    ce3 = combine(_results([q + shift for q in qs], vs), 100, 100)
    lo, hi = interval(ce, 0.95)
    lo3, hi3 = interval(ce3, 0.95)
    assert lo3[0] == pytest.approx(lo[0] + shift, rel=1e-9, abs=1e-9)
    assert hi3[0] - lo3[0] == pytest.approx(hi[0] - lo[0], rel=1e-9, abs=1e-12)


# -- intervals ---------------------------------------------------------------


@pytest.mark.parametrize("nu", [1.0, 4 / 9, 10.0, 100.0])
@pytest.mark.parametrize("prob", [0.75, 0.95, 0.975, 0.995])
def test_t_quantile_against_reference(nu, prob):
    ref = t_quantile_reference(prob, nu)
    assert float(t_quantile(prob, nu)) == pytest.approx(ref, rel=1e-8)
    if nu == 1.0:
        assert ref == pytest.approx(math.tan(math.pi * (prob - 0.5)), rel=1e-10)


def test_interval_limits_and_monotonicity():
    ce = combine(_results([1.0, 3.0], [1.0, 1.0]), 100, 100)
    ce.nu[:] = 1e6
    lo, hi = interval(ce, 0.95)
    assert (hi[0] - lo[0]) / 2 == pytest.approx(1.95996 * math.sqrt(2.0), abs=1e-3)
    ce = combine(_results([1.0, 3.0, 2.5], [1.0, 1.0, 0.5]), 100, 100)
    lo95, hi95 = interval(ce, 0.95)
    lo99, hi99 = interval(ce, 0.99)
    assert lo99[0] < lo95[0] and hi99[0] > hi95[0]
    with pytest.raises(ValueError):
        interval(ce, 1.0)


def test_interval_degenerate_when_T_star_zero():
    ce = combine(_results([1.0, 1.0], [1.0, 1.0]), n_syn=1, n=100)
    ce.T_star[:] = 0.0
    lo, hi = interval(ce, 0.9)
    assert lo[0] == hi[0] == 1.0


def test_to_json_fields():
    ce = combine(_results([1.0, 3.0], [1.0, 1.0]), 100, 100)
    rows = ce.to_json((0.9, 0.95))
    assert len(rows) == 2
    assert set(rows[0]) == {
        "coefficient", "q_bar", "T_star", "nu", "ci_lo", "ci_hi", "level", "m_used", "dropped_fraction",
    }


def test_rubin_coverage_on_gaussian_mean_model():
    # fully synthetic data from a conjugate model satisfies the combining
    # assumptions by construction
    rng = np.random.default_rng(2024)
    # m as in the coverage experiments; with m=20 the small degrees of freedom
    # make the intervals conservative (coverage near 0.99)
    n, m, reps, mu_true = 200, 100, 500, 0.3
    hits = 0
    for _ in range(reps):
        x = rng.normal(mu_true, 1.0, n)
        mus = rng.normal(x.mean(), 1 / math.sqrt(n), m)
        syn = rng.normal(mus[:, None], 1.0, (m, n))
        res = _results(syn.mean(axis=1), syn.var(axis=1, ddof=1) / n)
        lo, hi = interval(combine(res, n, n), 0.95)
        hits += lo[0] <= mu_true <= hi[0]
    assert 0.92 <= hits / reps <= 0.98


# -- outlier filtering ---------------------------------------------------------


def test_drop_outlier_variances():
    res = _results([1.0, 2.0, 3.0], [0.1, 1e5, 0.2])
    fr = drop_outlier_variances(res, 1e3)
    assert np.flatnonzero(fr.keep[:, 0]).tolist() == [0, 2]
    assert fr.dropped_fraction[0] == pytest.approx(1 / 3)
    ce = combine(fr, 10, 10)
    assert ce.q_bar[0] == 2.0 and ce.m[0] == 2
    clean = drop_outlier_variances(_results([1.0, 2.0], [0.1, 0.2]))
    assert clean.keep.all()
    with pytest.raises(CombineError, match="b"):
        drop_outlier_variances(
            [AnalysisResult([1, 1], [0.1, 1e4], names=("a", "b"))] * 3, 1e3
        )


# -- logistic regression --------------------------------------------------------


def test_logistic_consistency_large_n():
    data = sample_toy_data(10**6, 17)
    res = logistic_fit(data, "x3", ["x1", "x2"])
    assert res.names == ("intercept", "x1", "x2")
    assert res.converged
    np.testing.assert_allclose(res.q, [0.0, 1.0, 0.0], atol=0.01)


def test_logistic_balanced_table_is_exactly_zero():
    X = np.array([[0], [0], [1], [1]] * 5, float)
    y = np.array([0, 1, 0, 1] * 5)
    est = LogisticRegressionIRLS().fit(X, y)
    assert est.params_.tolist() == [0.0, 0.0]
    assert np.all(np.isfinite(est.params_var_))


def test_logistic_score_at_solution_and_matches_sklearn():
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(0)
    X = rng.integers(0, 2, (3000, 3)).astype(float)
    y = (rng.random(3000) < 1 / (1 + np.exp(-(X @ [0.5, -1, 0.2] + 0.1)))).astype(int)
    est = LogisticRegressionIRLS().fit(X, y)
    assert np.max(np.abs(est.score_vector(X, y))) < 1e-8
    ref = LogisticRegression(penalty=None, tol=1e-12, max_iter=10_000).fit(X, y)
    np.testing.assert_allclose(est.coef_, ref.coef_, atol=1e-5)
    assert est.predict_proba(X).shape == (3000, 2)
    assert clone(est).get_params() == est.get_params()


def test_observed_information_matches_statsmodels_formula():
    rng = np.random.default_rng(1)
    X = rng.integers(0, 2, (500, 2)).astype(float)
    y = (rng.random(500) < 0.4).astype(int)
    est = LogisticRegressionIRLS().fit(X, y)
    D = np.column_stack([np.ones(500), X])
    p = 1 / (1 + np.exp(-D @ est.params_))
    cov = np.linalg.inv((D * (p * (1 - p))[:, None]).T @ D)
    np.testing.assert_allclose(est.params_var_, np.diag(cov), rtol=1e-8)


def test_separation_flagged_and_regularisation_fixes_it():
    X = np.array([[0], [0], [1], [1], [0], [1]], float)
    y = np.array([0, 1, 1, 1, 0, 1])
    est = LogisticRegressionIRLS().fit(X, y)
    assert not est.converged_
    assert est.params_var_[1] > 1e3
    reg = LogisticRegressionIRLS(
        reg_lambda=1e-5, variance_method="bootstrap", n_bootstrap=50, random_state=0
    ).fit(X, y)
    assert np.all(np.isfinite(reg.params_)) and np.all(np.isfinite(reg.params_var_))


def test_bootstrap_variance_close_to_information():
    data = sample_toy_data(4000, 5)
    info = logistic_fit(data, "x3", ["x1", "x2"])
    boot = logistic_fit(data, "x3", ["x1", "x2"], variance_method="bootstrap",
                        n_bootstrap=300, rng_seed=1)
    np.testing.assert_allclose(boot.v, info.v, rtol=0.3)
    again = logistic_fit(data, "x3", ["x1", "x2"], variance_method="bootstrap",
                         n_bootstrap=300, rng_seed=1)
    assert np.array_equal(boot.v, again.v)


def test_design_matrix_dummy_coding():
    schema = Schema.from_json(
        [{"name": "y", "levels": ["n", "y"]}, {"name": "g", "levels": ["a", "b", "c"]}]
    )
    data = Dataset(schema, [[0, 0], [1, 1], [1, 2]])
    X, names = design_matrix(data, ["g"])
    assert names == ["g[b]", "g[c]"]
    assert X.tolist() == [[0, 0], [1, 0], [0, 1]]
    with pytest.raises(ValueError):
        logistic_fit(data, "g", ["y"])


def test_logistic_input_validation():
    with pytest.raises(ValueError):
        LogisticRegressionIRLS().fit(np.zeros((3, 1)), [0, 2, 1])
    with pytest.raises(ValueError):
        LogisticRegressionIRLS(reg_lambda=-1).fit(np.zeros((3, 1)), [0, 1, 1])
    with pytest.raises(ValueError):
        LogisticRegressionIRLS(variance_method="jackknife").fit(np.zeros((3, 1)), [0, 1, 1])


def test_naive_interval_is_wald():
    lo, hi = naive_interval(AnalysisResult([1.0], [4.0]), 0.95)
    assert hi[0] - 1.0 == pytest.approx(1.959963984540054 * 2, rel=1e-12)
