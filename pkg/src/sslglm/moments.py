"""Population moments of n-row covariate matrices, estimated from an unlabelled pool.

``H = E[X'X]`` and ``E[x]`` have closed forms in the pool.  Everything that
involves a nonlinear function of a whole matrix (inverses, squares, variances
of ``X'X beta``) is estimated by resampling ``B`` matrices of ``n`` rows from
the pool.  Replicates are split into ``groups`` contiguous blocks; each block
keeps its own means so that any derived quantity can be recomputed with one
block left out, which gives a delete-a-group jackknife standard error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from ._rng import as_generator
from .links import Identity, Link


@dataclass(frozen=True)
class McConfig:
    B: int = 2000
    seed: int = 0
    groups: int = 20

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be positive")
        if self.groups < 1:
            raise ValueError("groups must be positive")


def sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def estimate_H(Z: np.ndarray, n: int) -> np.ndarray:
    """(n/m) sum_i z_i z_i'."""
    Z = np.asarray(Z, dtype=float)
    return sym(n * (Z.T @ Z) / Z.shape[0])


def estimate_meanX(Z: np.ndarray) -> np.ndarray:
    return np.asarray(Z, dtype=float).mean(axis=0)


def _mc_indices(m: int, n: int, cfg: McConfig) -> np.ndarray:
    if m < n:
        raise ValueError(f"pool has {m} rows, fewer than n={n}")
    rng = as_generator(cfg.seed)
    out = np.empty((cfg.B, n), dtype=np.intp)
    for b in range(cfg.B):
        out[b] = rng.permutation(m) if m == n else rng.choice(m, size=n, replace=False)
    return out


def mc_matrices(Z: np.ndarray, n: int, cfg: McConfig) -> Iterator[np.ndarray]:
    """Yield ``cfg.B`` matrices of ``n`` pool rows, sampled without replacement
    within each matrix."""
    Z = np.asarray(Z, dtype=float)
    for idx in _mc_indices(Z.shape[0], n, cfg):
        yield Z[idx]


# ---------------------------------------------------------------------------
# grouped Monte Carlo means


class GroupedMeans:
    """Per-group means of per-replicate statistics.

    ``sums[k]`` has shape ``(G, ...)``; ``counts[k]`` the number of replicates
    that contributed to each group (replicates can be skipped per statistic).
    """

    def __init__(self, sums: dict, counts: dict):
        self.sums = sums
        self.counts = counts

    @property
    def groups(self) -> int:
        return len(next(iter(self.counts.values())))

    def mean(self, key: str, drop: int | None = None) -> np.ndarray:
        s, c = self.sums[key], self.counts[key]
        tot, cnt = s.sum(axis=0), c.sum()
        if drop is not None:
            tot, cnt = tot - s[drop], cnt - c[drop]
        return tot / cnt

    def count(self, key: str, drop: int | None = None) -> int:
        c = self.counts[key]
        return int(c.sum() - (c[drop] if drop is not None else 0))


def mc_batch(Z: np.ndarray, n: int, cfg: McConfig) -> np.ndarray:
    """All replicate matrices at once, shape ``(B, n, p)``."""
    Z = np.asarray(Z, dtype=float)
    return Z[_mc_indices(Z.shape[0], n, cfg)]


def _accumulate(Z: np.ndarray, n: int, cfg: McConfig, stats: Callable[[np.ndarray], dict],
                batch: np.ndarray | None = None) -> GroupedMeans:
    if batch is None:
        Z = np.asarray(Z, dtype=float)
        idx = _mc_indices(Z.shape[0], n, cfg)
        G = min(cfg.groups, cfg.B)
        chunks = (Z[c] for c in np.array_split(idx, G))
    else:
        G = min(cfg.groups, batch.shape[0])
        chunks = np.array_split(batch, G)
    sums: dict = {}
    counts: dict = {}
    for g, X in enumerate(chunks):
        for key, val in stats(X).items():
            valid = None
            if isinstance(val, tuple):
                val, valid = val
            if key not in sums:
                sums[key] = np.zeros((G,) + val.shape[1:])
                counts[key] = np.zeros(G, dtype=np.int64)
            if valid is not None:
                val = val[valid]
            sums[key][g] = val.sum(axis=0)
            counts[key][g] = val.shape[0]
    return GroupedMeans(sums, counts)


def _cov(gm: GroupedMeans, outer_key: str, mean_key: str, drop=None) -> np.ndarray:
    """Unbiased covariance from the means of v v' and v."""
    B = gm.count(mean_key, drop)
    v = gm.mean(mean_key, drop)
    vv = gm.mean(outer_key, drop)
    if v.ndim == 1:
        c = vv - np.outer(v, v)
    else:
        c = vv
    return sym(c) * (B / max(B - 1, 1))


def _gram(X: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Batched X' diag(w) X."""
    Xt = np.swapaxes(X, -1, -2)
    return sym(Xt @ X if w is None else (Xt * w[..., None, :]) @ X)


def _safe_inv(S: np.ndarray, cond_limit: float = 1e12):
    """Batched inverse with a mask of numerically singular members."""
    w = np.linalg.eigvalsh(S)
    ok = (w[:, 0] > 0) & (w[:, -1] < cond_limit * np.maximum(w[:, 0], 1e-300))
    inv = np.zeros_like(S)
    if np.any(ok):
        inv[ok] = np.linalg.inv(S[ok])
    return inv, ok


def _check_skips(gm: GroupedMeans, key: str, B: int):
    skipped = B - gm.count(key)
    if skipped > 0.01 * B:
        raise np.linalg.LinAlgError(f"{skipped} of {B} replicate matrices were singular")
    return skipped


# ---------------------------------------------------------------------------
# linear mode


@dataclass
class MomentEstimates:
    """Monte Carlo moments for the identity link.

    Quadratic forms:  ``b' M b = tr(H^-1 Var_X(X'X b))`` and
    ``b' M_breve b = tr(H^-1 Var_X(n E[x] mean(Xb) + X'C_n X b))``, so that
    ``B(tilde) = b'Mb / n`` and ``B(breve) = b'M_breve b / n``.
    """

    n: int
    B: int
    H: np.ndarray
    meanX: np.ndarray
    Q: np.ndarray
    M: np.ndarray
    M_breve: np.ndarray
    E2: np.ndarray
    J2: np.ndarray
    C: np.ndarray  # E[X' C_n X], C_n = I - 11'/n
    skipped: int = 0
    _gm: GroupedMeans | None = dataclasses.field(default=None, repr=False)

    @property
    def p(self) -> int:
        return self.H.shape[0]

    @property
    def H_inv(self) -> np.ndarray:
        return np.linalg.inv(self.H)

    @property
    def trQH(self) -> float:
        return float(np.trace(self.Q @ self.H))

    def leave_one_out(self) -> list["MomentEstimates"]:
        if self._gm is None:
            return []
        return [_linear_from_means(self._gm, self.n, self.H, self.meanX, drop=g) for g in range(self._gm.groups)]


def _linear_stats(n: int, H_inv: np.ndarray, meanX: np.ndarray):
    def stats(X):
        S = _gram(X)
        xbar = X.mean(axis=1)
        xx = np.einsum("bi,bj->bij", xbar, xbar)
        Sinv, ok = _safe_inv(S)
        K = n * np.einsum("i,bj->bij", meanX, xbar) + S - n * xx
        T = n * n * xx - S  # X'JX with J = 11' - I
        return {
            "S": S,
            "SHS": S @ H_inv @ S,
            "Sinv": (Sinv, ok),
            "K": K,
            "KHK": np.swapaxes(K, 1, 2) @ H_inv @ K,
            "S2": S @ S,
            "T": T,
            "T2": T @ T,
            "Cn": S - n * xx,
        }

    return stats


def _linear_from_means(gm: GroupedMeans, n, H, meanX, drop=None) -> MomentEstimates:
    H_inv = np.linalg.inv(H)
    B = gm.count("S", drop)
    f = B / max(B - 1, 1)
    S = gm.mean("S", drop)
    K = gm.mean("K", drop)
    T = gm.mean("T", drop)
    M = f * (gm.mean("SHS", drop) - S @ H_inv @ S)
    M_breve = f * (gm.mean("KHK", drop) - K.T @ H_inv @ K)
    J2 = f * (gm.mean("T2", drop) - T @ T)
    return MomentEstimates(
        n=n, B=B, H=H, meanX=meanX,
        Q=sym(gm.mean("Sinv", drop)),
        M=sym(M), M_breve=sym(M_breve),
        E2=sym(gm.mean("S2", drop)), J2=sym(J2),
        C=sym(gm.mean("Cn", drop)),
        skipped=B - gm.count("Sinv", drop),
        _gm=gm if drop is None else None,
    )


def estimate_moments(Z: np.ndarray, n: int, cfg: McConfig = McConfig()) -> MomentEstimates:
    """All identity-link moments from one pass over ``cfg.B`` resampled matrices."""
    Z = np.asarray(Z, dtype=float)
    if n <= Z.shape[1]:
        raise ValueError(f"need n > p, got n={n}, p={Z.shape[1]}")
    H = estimate_H(Z, n)
    meanX = estimate_meanX(Z)
    gm = _accumulate(Z, n, cfg, _linear_stats(n, np.linalg.inv(H), meanX))
    _check_skips(gm, "Sinv", cfg.B)
    return _linear_from_means(gm, n, H, meanX)


def jackknife(fn: Callable[..., np.ndarray | float], *ests) -> tuple[np.ndarray, np.ndarray]:
    """Value of ``fn(*ests)`` and its delete-a-group jackknife standard error.

    Several independent estimate objects may be passed; group ``g`` is dropped
    from all of them together.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.asarray(fn(*ests), dtype=float)
        loos = [e.leave_one_out() for e in ests]
        G = min(len(l) for l in loos)
        if G < 2:
            return value, np.full(value.shape, np.nan)
        vals = np.array([np.asarray(fn(*(l[g] for l in loos)), dtype=float) for g in range(G)])
        se = np.sqrt((G - 1) / G * np.sum((vals - vals.mean(axis=0)) ** 2, axis=0))
    return value, se


# thin single-quantity entry points --------------------------------------------


def estimate_Q(Z, n: int, cfg: McConfig = McConfig(), glm: tuple[np.ndarray, Link] | None = None) -> np.ndarray:
    """E[(X'X)^-1], or in GLM mode the sandwich E[(X'DX)^-1 X'X (X'DX)^-1]."""
    if glm is not None:
        beta, link = glm
        return estimate_glm_moments(Z, n, cfg, beta, link).Q
    return estimate_moments(Z, n, cfg).Q


def estimate_M(Z, n: int, cfg: McConfig = McConfig(), glm: tuple[np.ndarray, Link] | None = None):
    """Quadratic-form matrix M (linear mode) or the scalar tr(H^-1 Var_X(X'mu)) (GLM mode)."""
    if glm is not None:
        beta, link = glm
        return estimate_glm_moments(Z, n, cfg, beta, link).var_tilde
    return estimate_moments(Z, n, cfg).M


def estimate_breve_bias_terms(Z, n: int, cfg: McConfig, beta_or_mu) -> float:
    """B(breve) = (1/n) tr(H^-1 Var_X(n E[x] mean(mu) + n Cov-hat(X, mu))), H = E[X'X].

    ``beta_or_mu`` is either a coefficient vector (mu = X beta) or a callable
    mapping a batch of matrices ``(b, n, p)`` to the means ``(b, n)``.
    """
    Z = np.asarray(Z, dtype=float)
    H = estimate_H(Z, n)
    H_inv = np.linalg.inv(H)
    meanX = estimate_meanX(Z)
    if callable(beta_or_mu):
        mu_fn = beta_or_mu
    else:
        beta = np.asarray(beta_or_mu, dtype=float)
        mu_fn = lambda X: X @ beta  # noqa: E731

    def stats(X):
        mu = mu_fn(X)
        v = _breve_stat(X, mu, meanX)
        return {"v": v, "vv": np.einsum("bi,bj->bij", v, v)}

    gm = _accumulate(Z, n, cfg, stats)
    return float(np.trace(H_inv @ _cov(gm, "vv", "v")) / n)


def estimate_E2(Z, n: int, cfg: McConfig = McConfig()) -> np.ndarray:
    return estimate_moments(Z, n, cfg).E2


def estimate_J2(Z, n: int, cfg: McConfig = McConfig()) -> np.ndarray:
    return estimate_moments(Z, n, cfg).J2


def _breve_stat(X: np.ndarray, mu: np.ndarray, meanX: np.ndarray) -> np.ndarray:
    """n E[x] mean(mu) + X' C_n mu for a batch of matrices."""
    n = X.shape[1]
    mubar = mu.mean(axis=1)
    xbar = X.mean(axis=1)
    Xmu = np.einsum("bni,bn->bi", X, mu)
    return n * meanX[None, :] * mubar[:, None] + Xmu - n * xbar * mubar[:, None]


# ---------------------------------------------------------------------------
# misspecified mean function


@dataclass
class MisspecTerms:
    """Pieces of the squared-bias terms for a fixed (possibly nonlinear) f.

    ``bias_*`` are B_f(hat), B_f(tilde), B_f(breve) and B_f(0), each the sum
    of an across-X variance term and a pool variance of the mean residual.
    """

    n: int
    var_hat: float
    var_tilde: float
    var_breve: float
    resid_hat: float
    resid_tilde: float
    resid_breve: float
    var_f: float
    _gm: GroupedMeans | None = dataclasses.field(default=None, repr=False)
    _ctx: tuple | None = dataclasses.field(default=None, repr=False)

    @property
    def bias_hat(self) -> float:
        return self.var_hat + self.resid_hat

    @property
    def bias_tilde(self) -> float:
        return self.var_tilde + self.resid_tilde

    @property
    def bias_breve(self) -> float:
        return self.var_breve + self.resid_breve

    @property
    def bias_null(self) -> float:
        return self.var_f

    def leave_one_out(self) -> list["MisspecTerms"]:
        if self._gm is None:
            return []
        return [_misspec_from_means(self._gm, self._ctx, drop=g) for g in range(self._gm.groups)]


def _pool_resid_var(v: np.ndarray, ctx) -> float:
    # Var over the pool of x0'v - f(x0), from pool moment summaries
    n, H, H_inv, P, xbar, cf, mf, mf2 = ctx
    mean = xbar @ v - mf
    second = v @ P @ v - 2 * v @ cf + mf2
    return float(second - mean * mean)


def _misspec_from_means(gm: GroupedMeans, ctx, drop=None) -> MisspecTerms:
    n, H, H_inv, P, xbar, cf, mf, mf2 = ctx
    b_hat = gm.mean("b", drop)
    A = gm.mean("A", drop)
    Cx = gm.mean("C", drop)
    return MisspecTerms(
        n=n,
        var_hat=float(np.trace(H @ _cov(gm, "bb", "b", drop)) / n),
        var_tilde=float(np.trace(H_inv @ _cov(gm, "AA", "A", drop)) / n),
        var_breve=float(np.trace(H_inv @ _cov(gm, "CC", "C", drop)) / n),
        resid_hat=_pool_resid_var(b_hat, ctx),
        resid_tilde=_pool_resid_var(H_inv @ A, ctx),
        resid_breve=_pool_resid_var(H_inv @ Cx, ctx),
        var_f=float(mf2 - mf * mf),
        _gm=gm if drop is None else None,
        _ctx=ctx,
    )


def estimate_misspec_terms(Z, n: int, cfg: McConfig, f: Callable[[np.ndarray], np.ndarray]) -> MisspecTerms:
    """Monte Carlo estimates of the bias pieces for mean function ``f``.

    ``f`` maps an ``(rows, p)`` array to ``(rows,)``; pool rows double as the
    test points x0.
    """
    Z = np.asarray(Z, dtype=float)
    m = Z.shape[0]
    H = estimate_H(Z, n)
    H_inv = np.linalg.inv(H)
    meanX = estimate_meanX(Z)
    fz = np.asarray(f(Z), dtype=float)
    ctx = (n, H, H_inv, H / n, meanX, Z.T @ fz / m, float(fz.mean()), float(np.mean(fz * fz)))

    def stats(X):
        b, nn, p = X.shape
        fx = np.asarray(f(X.reshape(-1, p)), dtype=float).reshape(b, nn)
        S = _gram(X)
        A = np.einsum("bni,bn->bi", X, fx)
        Sinv, ok = _safe_inv(S)
        bh = np.einsum("bij,bj->bi", Sinv, A)
        C = _breve_stat(X, fx, meanX)
        outer = lambda v: np.einsum("bi,bj->bij", v, v)  # noqa: E731
        return {
            "b": (bh, ok), "bb": (outer(bh), ok),
            "A": A, "AA": outer(A),
            "C": C, "CC": outer(C),
        }

    gm = _accumulate(Z, n, cfg, stats)
    _check_skips(gm, "b", cfg.B)
    return _misspec_from_means(gm, ctx)


# ---------------------------------------------------------------------------
# GLM mode


@dataclass
class GlmMomentEstimates:
    """Moments for a general link evaluated at coefficient ``beta``.

    ``H = E[X'DX]`` with ``D = diag(g'(X beta))``, ``H1 = E[X'X]``,
    ``Q`` the sandwich ``E[(X'DX)^-1 X'X (X'DX)^-1]``, and the two traces
    ``var_tilde = tr(H^-1 Var_X(X'mu))``,
    ``var_breve = tr(H^-1 Var_X(n E[x] mean(mu) + n Cov-hat(X, mu)))``.
    ``R_beta`` and ``R_null`` are the out-of-sample losses of the true
    coefficient and of the null predictor ``mu0``.
    """

    n: int
    B: int
    beta: np.ndarray
    H: np.ndarray
    H1: np.ndarray
    Q: np.ndarray
    var_tilde: float
    var_breve: float
    mu0: float
    R_beta: float
    R_null: float
    skipped: int = 0
    sigma_trace: float = float("nan")  # tr(E[X'X (X'DX)^-1 X'D^2X (X'DX)^-1])
    _gm: GroupedMeans | None = dataclasses.field(default=None, repr=False)

    @property
    def trQH(self) -> float:
        return float(np.trace(self.Q @ self.H))

    @property
    def trH1(self) -> float:
        """tr(H^-1 E[X'X]); equals p for the identity link."""
        return float(np.trace(np.linalg.solve(self.H, self.H1)))

    def leave_one_out(self) -> list["GlmMomentEstimates"]:
        if self._gm is None:
            return []
        return [dataclasses.replace(self, **_glm_parts(self._gm, self.H, drop=g), _gm=None)
                for g in range(self._gm.groups)]


def glm_out_of_sample_loss(link: Link, eta: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Expected loss G(eta) - eta * E[y | x] for linear predictor ``eta``."""
    return link.G(eta) - eta * mu


def null_loss(link: Link, mu0: float) -> float:
    """R(0) = G(g^-1(mu0)) - g^-1(mu0) mu0."""
    eta0 = float(link.inverse(mu0))
    return float(link.G(eta0) - eta0 * mu0)


def _glm_parts(gm: GroupedMeans, H: np.ndarray, drop=None) -> dict:
    H_inv = np.linalg.inv(H)
    B = gm.count("v", drop)
    return dict(
        B=B,
        Q=sym(gm.mean("Q", drop)),
        var_tilde=float(np.trace(H_inv @ _cov(gm, "vv", "v", drop))),
        var_breve=float(np.trace(H_inv @ _cov(gm, "ww", "w", drop))),
        skipped=B - gm.count("Q", drop),
        sigma_trace=float(gm.mean("t", drop)),
    )


def estimate_glm_moments(Z, n: int, cfg: McConfig, beta: np.ndarray, link: Link = Identity(),
                         mu0: float | None = None, batch: np.ndarray | None = None) -> GlmMomentEstimates:
    """GLM-mode moments at ``beta``; ``mu0`` defaults to the pool mean of g(z'beta).

    ``batch`` (from :func:`mc_batch`) replaces fresh resampling, which saves
    time when the same pool is evaluated at many coefficients.
    """
    Z = np.asarray(Z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    m = Z.shape[0]
    eta_z = Z @ beta
    d_z = link.dg(eta_z)
    mu_z = link.g(eta_z)
    H = sym(n * (Z * d_z[:, None]).T @ Z / m)
    H1 = estimate_H(Z, n)
    meanX = estimate_meanX(Z)
    if mu0 is None:
        mu0 = float(mu_z.mean())

    def stats(X):
        eta = X @ beta
        mu = link.g(eta)
        d = link.dg(eta)
        XtDX = _gram(X, d)
        XtX = _gram(X)
        inv, ok = _safe_inv(XtDX)
        sand = inv @ XtX @ inv
        trace = np.einsum("bij,bji->b", sand, _gram(X, d * d))
        v = np.einsum("bni,bn->bi", X, mu)
        w = _breve_stat(X, mu, meanX)
        outer = lambda u: np.einsum("bi,bj->bij", u, u)  # noqa: E731
        return {"Q": (sym(sand), ok), "t": (trace, ok), "v": v, "vv": outer(v), "w": w, "ww": outer(w)}

    gm = _accumulate(Z, n, cfg, stats, batch)
    _check_skips(gm, "Q", gm.count("v"))
    R_beta = float(np.mean(glm_out_of_sample_loss(link, eta_z, mu_z)))
    return GlmMomentEstimates(
        n=n, beta=beta, H=H, H1=H1, mu0=mu0, R_beta=R_beta, R_null=null_loss(link, mu0),
        _gm=gm, **_glm_parts(gm, H),
    )


def estimate_glm_sigma_trace(Z, n: int, cfg: McConfig, beta: np.ndarray, link: Link,
                             batch: np.ndarray | None = None) -> float:
    """tr(E[X'X (X'DX)^-1 X'D^2X (X'DX)^-1]) with D = diag(g'(X beta))."""
    Z = np.asarray(Z, dtype=float)
    beta = np.asarray(beta, dtype=float)

    def stats(X):
        d = link.dg(X @ beta)
        inv, ok = _safe_inv(_gram(X, d))
        t = np.einsum("bij,bji->b", _gram(X) @ inv, _gram(X, d * d) @ inv)
        return {"t": (t, ok)}

    gm = _accumulate(Z, n, cfg, stats, batch)
    _check_skips(gm, "t", cfg.B if batch is None else batch.shape[0])
    return float(gm.mean("t"))
