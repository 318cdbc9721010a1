import numpy as np
import pytest

from sslglm.datagen import (
    ConfigurationError,
    ConstantBeta,
    CovariateModel,
    GlmLink,
    Misspecified,
    RandomBeta,
    eval_mean,
)
from sslglm.estimators import Estimator, fit_null, fit_ols_breve, fit_ols_hat, fit_ols_tilde
from sslglm.links import Elu, Identity
from sslglm.moments import McConfig, estimate_H
from sslglm.risk import (
    ESTIMATORS,
    PoolStats,
    Scenario,
    conditional_variances,
    eval_glm_risk,
    eval_squared_risk,
    find_crossings,
    ratio_with_stderr,
    run_replicates,
    with_overrides,
)

SMALL = dict(n=20, m=500, pool_size=4000, replicates=40, mc=McConfig(B=300, seed=1))


def _scenario(mean, family="gaussian", p=4, **kw):
    return Scenario(CovariateModel(p, family, blocks=2, rho=0.5), mean, **{**SMALL, **kw})


def test_find_crossings():
    g = np.array([0.0, 1.0, 2.0, 3.0])
    assert find_crossings(g, [1, 0.5, -0.5, -1], [0, 0, 0, 0]) == [1.5]
    assert find_crossings(g, [1, 2, 3, 4], [0, 0, 0, 0]) == []
    assert find_crossings(g, [-1, 1, -1, np.nan], [0, 0, 0, 0]) == [0.5, 1.5]
    assert find_crossings(g, [0, 1, 1, 0], [0, 0, 0, 0]) == [0.0, 3.0]


def test_pool_second_moment_matches_direct():
    rng = np.random.default_rng(0)
    pool = rng.standard_normal((1000, 3)) + 0.2
    h = np.abs(pool).sum(axis=1)
    st = PoolStats.from_pool(pool, h)
    a, d = 0.7, np.array([1.0, -2.0, 0.5])
    assert st.second_moment(a, d) == pytest.approx(np.mean((a + pool @ d - h) ** 2))


def test_squared_risk_conventions():
    rng = np.random.default_rng(1)
    pool = rng.standard_normal((5000, 3))
    model = Misspecified(1.0, 0.5)
    f = eval_mean(model, pool)
    assert eval_squared_risk(fit_null(f.mean()), model, pool) == pytest.approx(f.var())
    b = np.array([0.5, 1.0, 1.5])
    fit = fit_ols_hat(pool[:50], f[:50])
    fit.beta = b
    h = model.nonlinear(pool)
    assert eval_squared_risk(fit, model, pool) == pytest.approx(np.mean((pool @ b - f) ** 2) - h.mean() ** 2)
    # true linear model: plain mean squared error
    lin = ConstantBeta(1.0)
    assert eval_squared_risk(fit, lin, pool) == pytest.approx(np.mean((pool @ (b - 1.0)) ** 2))


def test_glm_risk_is_half_squared_for_identity():
    rng = np.random.default_rng(2)
    pool = rng.standard_normal((3000, 3))
    beta = np.ones(3)
    fit = fit_ols_hat(pool[:30], pool[:30] @ beta + rng.standard_normal(30))
    r = eval_glm_risk(fit, beta, Identity(), pool)
    assert r == pytest.approx(0.5 * np.mean((pool @ (fit.beta - beta)) ** 2))
    mu0 = float(np.mean(pool @ beta))
    assert eval_glm_risk(fit_null(mu0), beta, Identity(), pool) == pytest.approx(0.5 * np.var(pool @ beta))


@pytest.mark.parametrize("mean", [ConstantBeta(1.5), Misspecified(1.0, 0.4), RandomBeta(1.0)])
def test_vectorised_risks_match_direct_fits(mean):
    sc = _scenario(mean, family="uniform")
    grid = np.array([0.0, 4.0, 25.0])
    rc = run_replicates(sc, grid)
    pool = sc.pool()
    for i in (0, 7, 39):
        X, Z, eps, beta = sc.replicate_data(i)
        H = estimate_H(Z, sc.n)
        f_pool = eval_mean(mean, pool, beta)
        for g, s2 in enumerate(grid):
            Y = eval_mean(mean, X, beta) + np.sqrt(s2) * eps
            fits = {
                Estimator.HAT: fit_ols_hat(X, Y),
                Estimator.TILDE: fit_ols_tilde(X, Y, H),
                Estimator.BREVE: fit_ols_breve(X, Y, H, Z.mean(axis=0)),
                Estimator.NULL: fit_null(f_pool.mean()),
            }
            for e, fit in fits.items():
                direct = eval_squared_risk(fit, mean, pool, beta)
                assert rc.per_replicate[e][i, g] == pytest.approx(direct, rel=1e-8, abs=1e-9), (e, g)
            chosen = Estimator(rc.trace["chosen"][i, g])
            assert rc.per_replicate[Estimator.ADAPTIVE][i, g] == rc.per_replicate[chosen][i, g]


def test_bias_variance_identity():
    rc = run_replicates(_scenario(Misspecified(1.0, 0.4)), [0.0, 10.0, 50.0])
    for e in ESTIMATORS:
        np.testing.assert_allclose(rc.bias2[e] + rc.variance[e], rc.risk[e], rtol=1e-9, atol=1e-9)


def test_results_do_not_depend_on_workers():
    sc = _scenario(ConstantBeta(1.0), replicates=16)
    a = run_replicates(sc, [0.0, 5.0])
    b = run_replicates(sc, [0.0, 5.0], workers=2)
    for e in ESTIMATORS:
        np.testing.assert_array_equal(a.per_replicate[e], b.per_replicate[e])


def test_reproducible_and_seed_sensitive():
    sc = _scenario(ConstantBeta(1.0), replicates=10)
    a = run_replicates(sc, [1.0]).risk[Estimator.HAT]
    assert np.array_equal(a, run_replicates(sc, [1.0]).risk[Estimator.HAT])
    assert not np.array_equal(a, run_replicates(with_overrides(sc, seed=1), [1.0]).risk[Estimator.HAT])


def test_glm_identity_matches_linear_at_half_scale():
    beta = np.full(4, 1.5)
    grid = [0.0, 9.0]
    lin = run_replicates(_scenario(ConstantBeta(1.5), replicates=10), grid)
    glm = run_replicates(_scenario(GlmLink(beta, Identity()), replicates=10), grid)
    for e in (Estimator.HAT, Estimator.TILDE, Estimator.BREVE, Estimator.NULL):
        np.testing.assert_allclose(2 * glm.per_replicate[e], lin.per_replicate[e], rtol=1e-6, atol=1e-8)


def test_glm_elu_runs():
    sc = _scenario(GlmLink(np.full(4, 1.5), Elu(1.0)), replicates=5,
                   adaptive_mc=McConfig(B=50, groups=1))
    rc = run_replicates(sc, [0.0, 4.0])
    assert np.all(rc.failures == 0)
    assert rc.bias2 == {}
    assert np.all(rc.risk[Estimator.HAT] >= 0)
    assert rc.risk[Estimator.HAT][0] == pytest.approx(0.0, abs=1e-12)


def test_empty_and_invalid_grids():
    sc = _scenario(ConstantBeta(1.0), replicates=3)
    rc = run_replicates(sc, [])
    assert rc.risk[Estimator.HAT].shape == (0,)
    assert list(rc.rows()) == []
    with pytest.raises(ConfigurationError):
        run_replicates(sc, [-1.0])
    with pytest.raises(ConfigurationError):
        run_replicates(sc, [1.0], K=0)


def test_scenario_validation():
    cov = CovariateModel(4)
    with pytest.raises(ConfigurationError):
        Scenario(cov, ConstantBeta(1.0), n=4)
    with pytest.raises(ConfigurationError):
        Scenario(cov, ConstantBeta(1.0), m=2)
    with pytest.raises(ConfigurationError):
        Scenario(cov, GlmLink(np.ones(3)))


def test_rows_layout():
    rc = run_replicates(_scenario(ConstantBeta(1.0), replicates=3), [0.0, 1.0])
    rows = list(rc.rows())
    assert len(rows) == 2 * len(ESTIMATORS)
    assert [r[1] for r in rows[:5]] == ["hat", "tilde", "breve", "null", "adaptive"]


def test_hat_conditional_variance_gaussian():
    # E tr(Sigma (X'X)^-1) = p / (n - p - 1) for Gaussian rows
    sc = Scenario(CovariateModel(4), ConstantBeta(1.0), n=20, m=500, pool_size=20_000, replicates=2000)
    v = conditional_variances(sc, 3.0)
    assert v[Estimator.HAT].mean() == pytest.approx(3.0 * 4 / 15, rel=0.05)
    assert v[Estimator.TILDE].mean() == pytest.approx(3.0 * 4 / 20, rel=0.05)


def test_ratio_with_stderr():
    rng = np.random.default_rng(0)
    den = rng.uniform(1, 2, 5000)
    num = 0.5 * den + 0.01 * rng.standard_normal(5000)
    r, se = ratio_with_stderr(num, den)
    assert r == pytest.approx(0.5, abs=4 * se)
    assert 0 < se < 1e-3
