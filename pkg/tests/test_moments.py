import itertools

import numpy as np
import pytest

from sslglm.datagen import CovariateModel, Misspecified, eval_mean, sample_covariates
from sslglm.links import Elu, Identity
from sslglm.moments import (
    McConfig,
    estimate_breve_bias_terms,
    estimate_glm_moments,
    estimate_glm_sigma_trace,
    estimate_H,
    estimate_misspec_terms,
    estimate_moments,
    jackknife,
    mc_batch,
)


@pytest.fixture(scope="module")
def gaussian_pool():
    cov = CovariateModel(3, "gaussian", blocks=1, rho=0.5)
    return cov.latent_covariance(), sample_covariates(cov, 200_000, seed=10)


def test_H_is_scaled_pool_gram():
    Z = np.arange(12.0).reshape(4, 3)
    np.testing.assert_allclose(estimate_H(Z, 7), 7 * Z.T @ Z / 4)


def test_wishart_inverse_mean(gaussian_pool):
    # E[(X'X)^-1] = Sigma^-1 / (n - p - 1) for Gaussian rows
    Sigma, pool = gaussian_pool
    n = 12
    me = estimate_moments(pool, n, McConfig(B=8000, seed=1))
    np.testing.assert_allclose(me.Q, np.linalg.inv(Sigma) / (n - 3 - 1), rtol=0.05, atol=0.01)


def test_wishart_second_moment(gaussian_pool):
    # E[W^2] = n(n+1) Sigma^2 + n tr(Sigma) Sigma
    Sigma, pool = gaussian_pool
    n = 12
    me = estimate_moments(pool, n, McConfig(B=8000, seed=2))
    np.testing.assert_allclose(me.E2, n * (n + 1) * Sigma @ Sigma + n * np.trace(Sigma) * Sigma, rtol=0.05)


def test_wishart_bias_quadratic_form(gaussian_pool):
    # Var(W b) = n (b'Sigma b Sigma + Sigma b b' Sigma), so tr(H^-1 Var(W b)) = (p + 1) b'Sigma b
    Sigma, pool = gaussian_pool
    n = 12
    me = estimate_moments(pool, n, McConfig(B=8000, seed=3))
    b = np.array([1.0, -0.5, 2.0])
    val, se = jackknife(lambda e: b @ e.M @ b, me)
    target = 4 * b @ Sigma @ b
    assert abs(val - target) < max(4 * se, 0.05 * target)
    np.testing.assert_allclose(me.C, (n - 1) * Sigma, rtol=0.05, atol=0.1)


def _tiny_oracle(m):
    """Exhaustive expectation over the four 2x1 matrices drawn from a balanced +-1 pool."""
    same = (m / 2 - 1) / (m - 1)
    out = {"Q": 0.0, "S": 0.0, "S2": 0.0, "T": 0.0, "T2": 0.0, "K": 0.0, "K2": 0.0}
    for x in itertools.product([-1.0, 1.0], repeat=2):
        w = 0.5 * (same if x[0] == x[1] else 1 - same)
        x = np.array(x)
        S = x @ x
        xbar = x.mean()
        T = 4 * xbar**2 - S
        K = S - 2 * xbar**2  # the pool mean is exactly zero
        for key, v in (("Q", 1 / S), ("S", S), ("S2", S * S), ("T", T), ("T2", T * T), ("K", K), ("K2", K * K)):
            out[key] += w * v
    H = 2.0
    return {
        "Q": out["Q"],
        "M": (out["S2"] - out["S"] ** 2) / H,
        "E2": out["S2"],
        "J2": out["T2"] - out["T"] ** 2,
        "B_breve": (out["K2"] - out["K"] ** 2) / H / 2,
    }


TINY_FNS = {
    "Q": lambda e: e.Q[0, 0], "M": lambda e: e.M[0, 0], "E2": lambda e: e.E2[0, 0],
    "J2": lambda e: e.J2[0, 0], "B_breve": lambda e: e.M_breve[0, 0] / e.n,
}


def test_tiny_pool_against_enumeration():
    m = 10_000
    pool = np.tile([1.0, -1.0], m // 2)[:, None]
    oracle = _tiny_oracle(m)
    assert oracle["Q"] == 0.5 and oracle["E2"] == 4.0 and oracle["M"] == 0.0
    # J2 sits at a stationary point of its estimator (E[T] = 0), where the
    # jackknife collapses; the spread over independent Monte Carlo runs is used instead
    runs = [estimate_moments(pool, 2, McConfig(B=2000, seed=s)) for s in range(31)]
    for key, fn in TINY_FNS.items():
        vals = np.array([fn(e) for e in runs])
        se = vals[1:].std(ddof=1)
        assert abs(vals[0] - oracle[key]) <= 3 * se + 1e-12, (key, vals[0], oracle[key], se)


def test_breve_bias_entry_point_matches_moments():
    pool = sample_covariates(CovariateModel(4, "uniform"), 5000, seed=0)
    cfg = McConfig(B=500, seed=3)
    b = np.array([1.0, 0.5, -1.0, 2.0])
    me = estimate_moments(pool, 10, cfg)
    assert estimate_breve_bias_terms(pool, 10, cfg, b) == pytest.approx(b @ me.M_breve @ b / 10, rel=1e-9)


def test_jackknife_of_a_mean():
    # for a plain mean over equal groups the jackknife se is sd(group means) / sqrt(G)
    class Est:
        def __init__(self, groups, drop=None):
            self.groups, self.drop = groups, drop

        @property
        def value(self):
            keep = [g for i, g in enumerate(self.groups) if i != self.drop]
            return np.mean(keep)

        def leave_one_out(self):
            return [Est(self.groups, i) for i in range(len(self.groups))] if self.drop is None else []

    g = np.random.default_rng(0).standard_normal(20)
    val, se = jackknife(lambda e: e.value, Est(g))
    assert val == pytest.approx(g.mean())
    assert se == pytest.approx(g.std(ddof=1) / np.sqrt(20))


def test_jackknife_single_group_gives_nan():
    pool = sample_covariates(CovariateModel(2), 500, seed=0)
    me = estimate_moments(pool, 5, McConfig(B=50, groups=1))
    val, se = jackknife(lambda e: np.trace(e.Q), me)
    assert np.isfinite(val) and np.isnan(se)


def test_too_many_singular_draws():
    pool = np.zeros((1000, 2))
    pool[:, 0] = np.random.default_rng(0).standard_normal(1000)
    pool[:5, 1] = 1.0  # almost every 3-row draw is rank one
    with pytest.raises(np.linalg.LinAlgError):
        estimate_moments(pool, 3, McConfig(B=200))


def test_requires_n_above_p():
    with pytest.raises(ValueError):
        estimate_moments(np.ones((10, 3)), 3)


def test_identity_glm_moments_reduce_to_linear():
    pool = sample_covariates(CovariateModel(4, "t8", blocks=2, rho=0.5), 5000, seed=1)
    cfg = McConfig(B=400, seed=9)
    b = np.array([1.0, 2.0, -1.0, 0.5])
    me = estimate_moments(pool, 15, cfg)
    gm = estimate_glm_moments(pool, 15, cfg, b, Identity())
    np.testing.assert_allclose(gm.Q, me.Q, rtol=1e-10)
    np.testing.assert_allclose(gm.H, me.H, rtol=1e-12)
    assert gm.var_tilde == pytest.approx(b @ me.M @ b, rel=1e-8)
    assert gm.var_breve == pytest.approx(b @ me.M_breve @ b, rel=1e-8)
    assert gm.trH1 == pytest.approx(4)
    assert gm.sigma_trace == pytest.approx(4)
    # squared loss halved: R(0) - R(beta) = Var(x'b) / 2
    eta = pool @ b
    assert gm.R_null - gm.R_beta == pytest.approx(0.5 * eta.var(), rel=1e-9)


def test_glm_trace_paths_agree():
    pool = sample_covariates(CovariateModel(3), 3000, seed=2)
    cfg = McConfig(B=100, seed=1, groups=1)
    b = np.array([1.5, 1.5, 1.5])
    batch = mc_batch(pool, 20, cfg)
    link = Elu(1.0)
    gm = estimate_glm_moments(pool, 20, cfg, b, link, batch=batch)
    assert estimate_glm_sigma_trace(pool, 20, cfg, b, link, batch=batch) == pytest.approx(gm.sigma_trace)
    assert estimate_glm_sigma_trace(pool, 20, cfg, b, link) == pytest.approx(gm.sigma_trace)


def test_misspec_terms_without_nonlinearity():
    pool = sample_covariates(CovariateModel(3), 20_000, seed=4)
    cfg = McConfig(B=1000, seed=4)
    model = Misspecified(1.0, 0.0)
    b = np.ones(3)
    me = estimate_moments(pool, 10, cfg)
    t = estimate_misspec_terms(pool, 10, cfg, lambda X: eval_mean(model, X))
    assert t.var_tilde == pytest.approx(b @ me.M @ b / 10, rel=1e-8)
    assert t.var_breve == pytest.approx(b @ me.M_breve @ b / 10, rel=1e-8)
    assert t.bias_hat < 1e-10
    assert t.var_f == pytest.approx(np.var(pool.sum(axis=1)), rel=1e-9)
