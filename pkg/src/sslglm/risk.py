"""Replicated training draws and out-of-sample risk on a frozen evaluation pool.

For the linear scenarios every estimator is linear in Y, so with the same
X, unlabelled sample and standardised noise reused across the sigma^2 grid
each fit is ``b_f + sigma * b_eps`` and risks follow from pool second moments
without predicting on the pool row by row.

Squared-loss risks are reducible risks.  A linear predictor ``x'b`` is charged
``E[(x'b - f)^2] - (E h)^2`` where ``h`` is the part of ``f`` outside the
linear span; the null predictor (the pool mean of f) is charged ``Var(f)``.
For a true linear model this is just ``E[(x'b - f)^2]``.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property, partial

import numpy as np
from scipy import linalg

from . import adaptive
from ._rng import substream
from .datagen import (
    ConfigurationError,
    ConstantBeta,
    CovariateModel,
    GlmLink,
    MeanModel,
    Misspecified,
    RandomBeta,
    draw_beta,
    eval_mean,
    sample_covariates,
)
from .estimators import (
    ConvergenceError,
    Estimator,
    FitResult,
    SolverConfig,
    fit_glm,
    fit_glm_semisup,
)
from .links import Identity, Link
from .moments import McConfig, estimate_H, estimate_moments, mc_batch, null_loss
from .thresholds import thresholds_random_beta

ESTIMATORS = (Estimator.HAT, Estimator.TILDE, Estimator.BREVE, Estimator.NULL, Estimator.ADAPTIVE)
MAX_FAILURE_RATE = 0.01


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Scenario:
    covariates: CovariateModel
    mean: MeanModel
    n: int = 50
    m: int = 5000
    pool_size: int = 20_000
    replicates: int = 1000
    seed: int = 0
    mc: McConfig = McConfig()
    adaptive_mc: McConfig = McConfig(B=200, groups=1)
    solver: SolverConfig = SolverConfig()

    def __post_init__(self):
        p = self.covariates.p
        if self.n <= p:
            raise ConfigurationError(f"need n > p, got n={self.n}, p={p}")
        if self.m < p:
            raise ConfigurationError(f"unlabelled sample size m={self.m} is below p={p}")
        if self.pool_size < self.n:
            raise ConfigurationError(f"pool_size={self.pool_size} is below n={self.n}")
        if self.replicates < 1:
            raise ConfigurationError("replicates must be positive")
        if isinstance(self.mean, GlmLink):
            self.mean.linear_coef(p)

    @property
    def p(self) -> int:
        return self.covariates.p

    @property
    def mode(self) -> str:
        if isinstance(self.mean, GlmLink):
            return "glm"
        if isinstance(self.mean, RandomBeta):
            return "linear-random"
        if isinstance(self.mean, Misspecified):
            return "misspecified"
        return "linear-constant"

    @property
    def link(self) -> Link:
        return self.mean.link if isinstance(self.mean, GlmLink) else Identity()

    def pool(self) -> np.ndarray:
        """The frozen evaluation pool, also used for every unlabelled-moment estimate."""
        return sample_covariates(self.covariates, self.pool_size, substream(self.seed, "pool"))

    def replicate_data(self, i: int):
        """(X, Z, standard-normal noise, beta or None) for training replicate ``i``."""
        X = sample_covariates(self.covariates, self.n, substream(self.seed, "replicate", i, "X"))
        Z = sample_covariates(self.covariates, self.m, substream(self.seed, "replicate", i, "Z"))
        eps = substream(self.seed, "replicate", i, "noise").standard_normal(self.n)
        beta = None
        if isinstance(self.mean, RandomBeta):
            beta = draw_beta(self.mean, self.p, substream(self.seed, "replicate", i, "beta"))
        return X, Z, eps, beta


@dataclass
class RiskCurve:
    """Risk summaries per estimator over ``sigma2_grid``.

    ``per_replicate[e]`` is the ``(K, G)`` array of single-replicate risks
    (NaN where a fit failed); ``bias2``/``variance`` are absent in GLM mode.
    """

    sigma2_grid: np.ndarray
    K: int
    risk: dict
    stderr: dict
    bias2: dict
    variance: dict
    per_replicate: dict
    failures: np.ndarray
    trace: dict = field(default_factory=dict)

    def paired_stderr(self, a: Estimator, b: Estimator) -> np.ndarray:
        """Standard error of mean(risk_a - risk_b), replicate by replicate."""
        diff = self.per_replicate[a] - self.per_replicate[b]
        k = np.sum(~np.isnan(diff), axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.nanstd(diff, axis=0, ddof=1) / np.sqrt(k)

    def rows(self):
        """(sigma2, estimator, risk, stderr, bias2, variance) tuples in grid order."""
        for g, s2 in enumerate(self.sigma2_grid):
            for e in ESTIMATORS:
                bias2 = self.bias2.get(e)
                var = self.variance.get(e)
                yield (float(s2), e.value, self.risk[e][g], self.stderr[e][g],
                       None if bias2 is None else bias2[g], None if var is None else var[g])


# ---------------------------------------------------------------------------
# risk functionals


@dataclass
class PoolStats:
    """Pool summaries needed for quadratic squared-loss risks.

    With ``f(x) = x'beta + h(x)``: ``P = E[xx']``, ``xbar = E[x]``,
    ``mean_h``, ``mean_h2`` and ``c_h = E[x h(x)]``.
    """

    P: np.ndarray
    xbar: np.ndarray
    mean_h: float
    mean_h2: float
    c_h: np.ndarray

    @classmethod
    def from_pool(cls, pool: np.ndarray, h: np.ndarray) -> "PoolStats":
        M = pool.shape[0]
        return cls(pool.T @ pool / M, pool.mean(axis=0), float(h.mean()), float(np.mean(h * h)),
                   pool.T @ h / M)

    def second_moment(self, a, d):
        """Pool mean of ``(a + x'd - h(x))^2`` for broadcastable ``a`` and ``d[..., p]``."""
        dPd = np.einsum("...i,ij,...j->...", d, self.P, d)
        return (a * a + dPd + self.mean_h2 + 2 * a * (d @ self.xbar)
                - 2 * a * self.mean_h - 2 * (d @ self.c_h))


def eval_squared_risk(fit: FitResult, mean_model: MeanModel, pool: np.ndarray,
                      beta: np.ndarray | None = None) -> float:
    """Reducible squared-loss risk of ``fit`` on ``pool`` (see module docstring)."""
    f = eval_mean(mean_model, pool, beta)
    if fit.estimator is Estimator.NULL:
        return float(np.mean((fit.mu0 - f) ** 2))
    e = pool @ fit.beta - f
    h = _nonlinear_part(mean_model, pool)
    return float(np.mean(e * e) - h.mean() ** 2)


def _nonlinear_part(mean_model: MeanModel, X: np.ndarray) -> np.ndarray:
    if isinstance(mean_model, (ConstantBeta, Misspecified)):
        return mean_model.nonlinear(X)
    return np.zeros(X.shape[0])


def eval_glm_risk(fit: FitResult, beta_true: np.ndarray, link: Link, pool: np.ndarray) -> float:
    """Out-of-sample GLM loss of ``fit`` minus that of the true coefficient."""
    eta = pool @ np.asarray(beta_true, dtype=float)
    mu = link.g(eta)
    R_beta = float(np.mean(link.G(eta) - eta * mu))
    if fit.estimator is Estimator.NULL:
        return null_loss(link, fit.mu0) - R_beta
    eta_fit = pool @ fit.beta
    return float(np.mean(link.G(eta_fit) - eta_fit * mu)) - R_beta


def find_crossings(grid, r1, r2) -> list[float]:
    """Grid values where ``r1 - r2`` changes sign, by linear interpolation."""
    grid = np.asarray(grid, dtype=float)
    d = np.asarray(r1, dtype=float) - np.asarray(r2, dtype=float)
    out = []
    for i in range(len(grid) - 1):
        a, b = d[i], d[i + 1]
        if np.isnan(a) or np.isnan(b):
            continue
        if a == 0:
            out.append(float(grid[i]))
        elif a * b < 0:
            out.append(float(grid[i] + (grid[i + 1] - grid[i]) * a / (a - b)))
    if len(d) and d[-1] == 0:
        out.append(float(grid[-1]))
    return out


# ---------------------------------------------------------------------------
# replicate workers


@dataclass
class _Context:
    scenario: Scenario
    sigma2: np.ndarray

    @cached_property
    def pool(self) -> np.ndarray:
        return self.scenario.pool()

    @cached_property
    def stats(self) -> PoolStats:
        return PoolStats.from_pool(self.pool, _nonlinear_part(self.scenario.mean, self.pool))

    @cached_property
    def moments(self):
        return estimate_moments(self.pool, self.scenario.n, self.scenario.mc)

    @cached_property
    def random_report(self):
        return thresholds_random_beta(self.moments)

    @cached_property
    def batch(self) -> np.ndarray:
        sc = self.scenario
        return mc_batch(self.pool, sc.n, sc.adaptive_mc)

    @cached_property
    def glm_pool(self):
        sc = self.scenario
        beta = sc.mean.linear_coef(sc.p)
        eta = self.pool @ beta
        mu = sc.link.g(eta)
        return mu, float(np.mean(sc.link.G(eta) - eta * mu)), float(mu.mean())

    def prepare(self):
        # materialise lazily computed pieces before shipping to worker processes
        _ = self.pool, self.stats
        if self.scenario.mode == "glm":
            _ = self.batch, self.glm_pool
        else:
            _ = self.moments
            if self.scenario.mode == "linear-random":
                _ = self.random_report
        return self


def _linear_replicate(ctx: _Context, i: int) -> dict:
    sc = ctx.scenario
    n, p = sc.n, sc.p
    X, Z, eps, beta = sc.replicate_data(i)
    s = np.sqrt(ctx.sigma2)
    G = len(s)
    blin = beta if beta is not None else sc.mean.linear_coef(p)
    fX = eval_mean(sc.mean, X, beta)
    H = estimate_H(Z, n)
    mX = Z.mean(axis=0)
    try:
        cS = linalg.cho_factor(X.T @ X, lower=True)
        cH = linalg.cho_factor(H, lower=True)
    except linalg.LinAlgError:
        return {"failed": True}
    L = {
        Estimator.HAT: linalg.cho_solve(cS, X.T),
        Estimator.TILDE: linalg.cho_solve(cH, X.T),
        Estimator.BREVE: linalg.cho_solve(cH, X.T + np.outer(mX - X.mean(axis=0), np.ones(n))),
    }
    a, d, coefs = {}, {}, {}
    for e, Le in L.items():
        coefs[e] = (Le @ fX)[None, :] + s[:, None] * (Le @ eps)[None, :]
        a[e] = np.zeros(G)
        d[e] = coefs[e] - blin
    mu0 = float(ctx.stats.xbar @ blin + ctx.stats.mean_h)
    a[Estimator.NULL] = np.full(G, mu0)
    d[Estimator.NULL] = np.tile(-blin, (G, 1))

    # residuals are linear in sigma too
    r_f = fX - X @ (L[Estimator.HAT] @ fX)
    r_e = eps - X @ (L[Estimator.HAT] @ eps)
    s2_hat = (r_f @ r_f + 2 * s * (r_f @ r_e) + s * s * (r_e @ r_e)) / (n - p)
    nsr = np.full(G, np.nan)
    if sc.mode == "linear-random":
        y2 = ((fX @ fX) + 2 * s * (fX @ eps) + s * s * (eps @ eps)) / n
        tau2 = np.maximum((y2 - s2_hat) / np.trace(ctx.stats.P), 0.0)
        with np.errstate(divide="ignore"):
            nsr = np.where(tau2 > 0, s2_hat / np.where(tau2 > 0, tau2, 1.0), np.inf)
        rep = ctx.random_report
        f_b, u_b, cross = (np.full(G, v) for v in (rep.f_breve, rep.u_breve, rep.null_crossover))
        f_raw = f_b
        stat = nsr
    else:
        _, _, f_b, u_b, cross = adaptive.plugin_thresholds_many(ctx.moments, coefs[Estimator.BREVE], s2_hat)
        f_raw = adaptive.plugin_thresholds_many(ctx.moments, coefs[Estimator.BREVE], s2_hat, correct=False)[2]
        stat = s2_hat
    chosen = adaptive.select_many(f_b, u_b, cross, stat)
    pick = {Estimator.HAT.value: Estimator.HAT, Estimator.BREVE.value: Estimator.BREVE,
            Estimator.NULL.value: Estimator.NULL}
    a[Estimator.ADAPTIVE] = np.array([a[pick[c]][g] for g, c in enumerate(chosen)])
    d[Estimator.ADAPTIVE] = np.array([d[pick[c]][g] for g, c in enumerate(chosen)])
    return {"failed": False, "a": a, "d": d, "chosen": chosen, "sigma2_hat": s2_hat, "nsr_hat": nsr,
            "F_breve": f_b, "U_breve": u_b, "F_breve_raw": f_raw}


def _glm_replicate(ctx: _Context, i: int) -> dict:
    sc = ctx.scenario
    link, cfg = sc.link, sc.solver
    X, Z, eps, _ = sc.replicate_data(i)
    beta = sc.mean.linear_coef(sc.p)
    fX = link.g(X @ beta)
    mu_pool, R_beta, mu0 = ctx.glm_pool
    R_null = null_loss(link, mu0) - R_beta
    G = len(ctx.sigma2)
    risks = {e: np.full(G, np.nan) for e in ESTIMATORS}
    chosen = np.full(G, "", dtype=object)
    s2_hat = np.full(G, np.nan)
    f_b = np.full(G, np.nan)
    u_b = np.full(G, np.nan)
    failed = np.zeros(G, dtype=bool)

    def risk_of(b):
        eta = ctx.pool @ b
        return float(np.mean(link.G(eta) - eta * mu_pool)) - R_beta

    for g, s in enumerate(np.sqrt(ctx.sigma2)):
        Y = fX + s * eps
        try:
            fits = {
                Estimator.HAT: fit_glm(X, Y, link, cfg),
                Estimator.TILDE: fit_glm_semisup(X, Y, Z, link, Estimator.TILDE, cfg),
                Estimator.BREVE: fit_glm_semisup(X, Y, Z, link, Estimator.BREVE, cfg),
            }
            dec = adaptive.decide_glm(X, Y, ctx.pool, fits[Estimator.HAT].beta, fits[Estimator.BREVE].beta,
                                      link, sc.adaptive_mc, batch=ctx.batch)
        except (np.linalg.LinAlgError, ConvergenceError, ValueError):
            failed[g] = True
            continue
        for e, fit in fits.items():
            risks[e][g] = risk_of(fit.beta)
        risks[Estimator.NULL][g] = R_null
        risks[Estimator.ADAPTIVE][g] = risks[dec.chosen][g]
        chosen[g] = dec.chosen.value
        s2_hat[g] = dec.sigma2_hat
        f_b[g] = dec.thresholds_used.f_breve
        u_b[g] = dec.thresholds_used.u_breve
    return {"failed": failed, "risk": risks, "chosen": chosen, "sigma2_hat": s2_hat,
            "nsr_hat": np.full(G, np.nan), "F_breve": f_b, "U_breve": u_b, "F_breve_raw": f_b}


def _run_chunk(ctx: _Context, indices) -> list:
    work = _glm_replicate if ctx.scenario.mode == "glm" else _linear_replicate
    return [work(ctx, i) for i in indices]


def _map_replicates(ctx: _Context, K: int, workers: int) -> list:
    if workers <= 1:
        return _run_chunk(ctx, range(K))
    chunks = np.array_split(np.arange(K), workers * 4)
    with ProcessPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(partial(_run_chunk, ctx.prepare()), [c.tolist() for c in chunks]))
    return [r for part in parts for r in part]


# ---------------------------------------------------------------------------
# aggregation


def _stderr(x: np.ndarray) -> np.ndarray:
    k = np.sum(~np.isnan(x), axis=0)
    out = np.full(x.shape[1], np.nan)
    ok = k > 1
    if np.any(ok):
        out[ok] = np.nanstd(x[:, ok], axis=0, ddof=1) / np.sqrt(k[ok])
    return out


def _aggregate_linear(ctx: _Context, results: list, G: int):
    st = ctx.stats
    valid = np.array([not r["failed"] for r in results])
    K = len(results)
    risk, stderr, bias2, variance, per_rep = {}, {}, {}, {}, {}
    offset_lin = st.mean_h ** 2
    ok = [r for r in results if not r["failed"]]
    if not ok:
        raise SimulationError("every replicate failed")
    for e in ESTIMATORS:
        a = np.array([r["a"][e] for r in ok]).reshape(len(ok), G)
        d = np.array([r["d"][e] for r in ok]).reshape(len(ok), G, -1)
        if e is Estimator.NULL:
            off = np.zeros_like(a)
        elif e is Estimator.ADAPTIVE:
            chosen = np.array([r["chosen"] for r in ok]).reshape(len(ok), G)
            off = np.where(chosen == Estimator.NULL.value, 0.0, offset_lin)
        else:
            off = np.full_like(a, offset_lin)
        r_k = st.second_moment(a, d) - off
        full = np.full((K, G), np.nan)
        full[valid] = r_k
        per_rep[e] = full
        risk[e] = r_k.mean(axis=0) if len(ok) else np.full(G, np.nan)
        stderr[e] = _stderr(r_k) if len(ok) else np.full(G, np.nan)
        a_bar, d_bar = a.mean(axis=0), d.mean(axis=0)
        b2 = st.second_moment(a_bar, d_bar) - off.mean(axis=0)
        da, dd = a - a_bar, d - d_bar
        var = (np.mean(da * da, axis=0)
               + np.mean(np.einsum("kgi,ij,kgj->kg", dd, st.P, dd), axis=0)
               + 2 * np.mean(da * (dd @ st.xbar), axis=0))
        bias2[e], variance[e] = b2, var
    failures = np.tile((~valid).sum(), G)
    return risk, stderr, bias2, variance, per_rep, failures


def _aggregate_glm(results: list, G: int):
    K = len(results)
    failed = np.array([r["failed"] for r in results]).reshape(K, G)
    risk, stderr, per_rep = {}, {}, {}
    for e in ESTIMATORS:
        r_k = np.array([r["risk"][e] for r in results]).reshape(K, G)
        per_rep[e] = r_k
        with np.errstate(invalid="ignore"):
            risk[e] = np.nanmean(np.where(failed, np.nan, r_k), axis=0) if K else np.full(G, np.nan)
        stderr[e] = _stderr(r_k)
    return risk, stderr, {}, {}, per_rep, failed.sum(axis=0)


def run_replicates(scenario: Scenario, sigma2_grid, K: int | None = None, workers: int = 1) -> RiskCurve:
    """Fit every estimator on ``K`` replicated training sets at each grid point.

    Replicate ``i`` draws its data from substreams keyed by the scenario seed
    and ``i``, so results do not depend on ``workers``.  Grid points where more
    than 1% of replicates fail are reported as NaN.
    """
    grid = np.asarray(sigma2_grid, dtype=float).ravel()
    if np.any(grid < 0):
        raise ConfigurationError("sigma2 grid values must be non-negative")
    K = scenario.replicates if K is None else int(K)
    if K < 1:
        raise ConfigurationError("K must be positive")
    G = len(grid)
    if G == 0:
        empty = {e: np.empty(0) for e in ESTIMATORS}
        return RiskCurve(grid, K, empty, dict(empty), {}, {}, {e: np.empty((K, 0)) for e in ESTIMATORS},
                         np.empty(0, dtype=int))
    ctx = _Context(scenario, grid)
    results = _map_replicates(ctx, K, workers)
    if scenario.mode == "glm":
        risk, stderr, bias2, variance, per_rep, failures = _aggregate_glm(results, G)
    else:
        risk, stderr, bias2, variance, per_rep, failures = _aggregate_linear(ctx, results, G)
    bad = failures > MAX_FAILURE_RATE * K
    for dct in (risk, stderr, bias2, variance):
        for e in dct:
            dct[e] = np.where(bad, np.nan, dct[e])
    trace = {}
    if results:
        for key in ("sigma2_hat", "nsr_hat", "F_breve", "U_breve", "F_breve_raw", "chosen"):
            rows = [r[key] if key in r else np.full(G, np.nan) for r in results]
            trace[key] = np.array(rows, dtype=object if key == "chosen" else float).reshape(K, G)
    return RiskCurve(grid, K, risk, stderr, bias2, variance, per_rep, failures, trace)


# ---------------------------------------------------------------------------
# conditional variance by paired noise draws


def conditional_variances(scenario: Scenario, sigma2: float, K: int | None = None) -> dict:
    """Per-replicate estimates of V = E_x0 Var(x0'b | X) for hat, tilde and breve.

    Two independent noise vectors are drawn for the same X; half the pool mean
    of the squared prediction difference is unbiased for the conditional
    variance.  Returns ``{estimator: array of length K}``.
    """
    if scenario.mode == "glm":
        raise ConfigurationError("conditional variances are defined for the linear scenarios")
    K = scenario.replicates if K is None else int(K)
    n = scenario.n
    pool = scenario.pool()
    P = pool.T @ pool / pool.shape[0]
    out = {e: np.empty(K) for e in (Estimator.HAT, Estimator.TILDE, Estimator.BREVE)}
    for i in range(K):
        X, Z, _, _ = scenario.replicate_data(i)
        rng = substream(scenario.seed, "replicate", i, "paired-noise")
        delta = np.sqrt(sigma2) * (rng.standard_normal(n) - rng.standard_normal(n))
        H = estimate_H(Z, n)
        mX = Z.mean(axis=0)
        diffs = {
            Estimator.HAT: np.linalg.solve(X.T @ X, X.T @ delta),
            Estimator.TILDE: np.linalg.solve(H, X.T @ delta),
            Estimator.BREVE: np.linalg.solve(H, X.T @ delta + (mX - X.mean(axis=0)) * delta.sum()),
        }
        for e, v in diffs.items():
            out[e][i] = 0.5 * v @ P @ v
    return out


def ratio_with_stderr(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """mean(num)/mean(den) for paired samples, with a delta-method standard error."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    r = num.mean() / den.mean()
    resid = num - r * den
    return float(r), float(resid.std(ddof=1) / np.sqrt(len(num)) / den.mean())


def with_overrides(scenario: Scenario, **kw) -> Scenario:
    return dataclasses.replace(scenario, **kw)
