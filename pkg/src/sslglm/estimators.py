"""Supervised, semi-supervised and null predictors for linear and GLM regression.

Three estimators of the coefficient vector are fitted from labelled data
``(X, Y)`` and, for the semi-supervised ones, an unlabelled pool ``Z``:

* ``hat``   -- ordinary ERM on the labelled sample.
* ``tilde`` -- the covariate-only part of the risk, E[G(x'b)], is replaced by a pool average.
* ``breve`` -- additionally splits the cross term into pool-mean times Y-bar plus the
  sample covariance of X and Y.

For the identity link all three have closed forms; otherwise they are found by
(damped) Newton-Raphson.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .datagen import MeanModel, RandomBeta, eval_mean
from .links import Link


class Estimator(str, enum.Enum):
    HAT = "hat"
    TILDE = "tilde"
    BREVE = "breve"
    NULL = "null"
    ADAPTIVE = "adaptive"

    def __str__(self) -> str:
        return self.value


class RankDeficientError(np.linalg.LinAlgError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class SingularHessianError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    """Newton iterations hit ``max_iter``; the last iterate is kept on the exception."""

    def __init__(self, message: str, beta: np.ndarray, grad_norm: float, iterations: int):
        super().__init__(message)
        self.beta = beta
        self.grad_norm = grad_norm
        self.iterations = iterations


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    max_iter: int = 100
    step_damping: float = 1.0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.step_damping <= 1:
            raise ValueError("step_damping must lie in (0, 1]")


@dataclass
class FitResult:
    beta: np.ndarray | None
    estimator: Estimator
    iterations: int = 0
    grad_norm: float = 0.0
    mu0: float | None = None


def _cho(A: np.ndarray, what: str, exc=NotPositiveDefiniteError):
    A = 0.5 * (A + A.T)
    try:
        c = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as err:
        raise exc(f"{what} is not positive definite") from err
    d = np.diag(c[0])
    if not np.all(d > 0) or d.min() ** 2 < 1e-13 * d.max() ** 2:
        raise exc(f"{what} is numerically singular")
    return c


# ---------------------------------------------------------------------------
# closed forms (identity link)


def fit_ols_hat(X: np.ndarray, Y: np.ndarray) -> FitResult:
    """Least squares, (X'X)^-1 X'Y."""
    X = np.asarray(X, dtype=float)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientError(f"X has rank below p={X.shape[1]}")
    c = _cho(X.T @ X, "X'X", RankDeficientError)
    return FitResult(linalg.cho_solve(c, X.T @ Y), Estimator.HAT)


def fit_ols_tilde(X: np.ndarray, Y: np.ndarray, H: np.ndarray) -> FitResult:
    """H^-1 X'Y with H = E[X'X] supplied from unlabelled data."""
    c = _cho(np.asarray(H, dtype=float), "H")
    return FitResult(linalg.cho_solve(c, X.T @ Y), Estimator.TILDE)


def sample_cov(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Per-column covariance of X with Y, normalised by n (not n - 1)."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    return (X - X.mean(axis=0)).T @ (Y - Y.mean()) / X.shape[0]


def fit_ols_breve(X: np.ndarray, Y: np.ndarray, H: np.ndarray, meanX: np.ndarray) -> FitResult:
    """H^-1 n (E[x] Y-bar + Cov-hat(X, Y))."""
    n = X.shape[0]
    c = _cho(np.asarray(H, dtype=float), "H")
    rhs = n * (np.asarray(meanX, dtype=float) * np.mean(Y) + sample_cov(X, Y))
    return FitResult(linalg.cho_solve(c, rhs), Estimator.BREVE)


def null_mu0(mean_model: MeanModel, pool: np.ndarray, beta: np.ndarray | None = None) -> float:
    """Population mean of the response, estimated by a pool average of f(x)."""
    pool = np.asarray(pool, dtype=float)
    if pool.shape[0] == 0:
        raise ValueError("empty pool")
    if isinstance(mean_model, RandomBeta) and beta is None:
        # E[x'beta] = 0 for centred covariates whatever beta is drawn
        return 0.0
    return float(np.mean(eval_mean(mean_model, pool, beta)))


def fit_null(mu0: float) -> FitResult:
    return FitResult(None, Estimator.NULL, mu0=float(mu0))


# ---------------------------------------------------------------------------
# Newton-Raphson for general links


def _newton(objective, gradient, hessian, beta0, cfg: SolverConfig, estimator: Estimator):
    beta = np.array(beta0, dtype=float)
    grad = gradient(beta)
    gnorm = float(np.linalg.norm(grad))
    obj = objective(beta)
    it = 0
    while gnorm > cfg.tol:
        if it >= cfg.max_iter:
            raise ConvergenceError(
                f"{estimator} fit did not converge in {cfg.max_iter} iterations "
                f"(gradient norm {gnorm:.3e})",
                beta, gnorm, it,
            )
        c = _cho(hessian(beta), "Hessian", SingularHessianError)
        step = cfg.step_damping * linalg.cho_solve(c, grad)
        # halve while the objective increases; near the optimum rounding makes the
        # objective flat, so a smaller gradient also counts as progress
        for _ in range(60):
            cand = beta - step
            cobj = objective(cand)
            cgrad = gradient(cand)
            cnorm = float(np.linalg.norm(cgrad))
            if cobj <= obj + 1e-13 * max(1.0, abs(obj)) or cnorm < gnorm:
                break
            step = 0.5 * step
        beta, obj, grad, gnorm = cand, cobj, cgrad, cnorm
        it += 1
    return FitResult(beta, estimator, iterations=it, grad_norm=gnorm)


def _check_link(link: Link, z: np.ndarray):
    d = link.dg(z)
    if np.any(d < 0):
        raise ValueError("link must be monotone increasing")
    return d


def fit_glm(X: np.ndarray, Y: np.ndarray, link: Link, cfg: SolverConfig = SolverConfig()) -> FitResult:
    """Supervised GLM-ERM: minimise (1/n) sum G(x_i'b) - x_i'b y_i."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, p = X.shape
    XtY = X.T @ Y / n

    def objective(b):
        eta = X @ b
        return float(np.mean(link.G(eta)) - b @ XtY)

    def gradient(b):
        return X.T @ link.g(X @ b) / n - XtY

    def hessian(b):
        d = _check_link(link, X @ b)
        return (X * d[:, None]).T @ X / n

    return _newton(objective, gradient, hessian, np.zeros(p), cfg, Estimator.HAT)


def semisup_target(X: np.ndarray, Y: np.ndarray, Z: np.ndarray, variant: Estimator) -> np.ndarray:
    """The label-dependent term the pool average of x g(x'b) must match."""
    variant = Estimator(variant)
    if variant is Estimator.TILDE:
        return X.T @ Y / X.shape[0]
    if variant is Estimator.BREVE:
        return Z.mean(axis=0) * np.mean(Y) + sample_cov(X, Y)
    raise ValueError(f"semi-supervised variant must be tilde or breve, got {variant}")


def semisup_gradient(beta, X, Y, Z, link: Link, variant: Estimator) -> np.ndarray:
    """Semi-supervised gradient with E_x[g(x'b) x] replaced by the pool average."""
    return Z.T @ link.g(Z @ beta) / Z.shape[0] - semisup_target(X, Y, Z, variant)


def fit_glm_semisup(
    X: np.ndarray,
    Y: np.ndarray,
    Z: np.ndarray,
    link: Link,
    variant: Estimator | str,
    cfg: SolverConfig = SolverConfig(),
) -> FitResult:
    """Semi-supervised Newton: Hessian (1/m) Z'DZ and gradient from the full pool each step."""
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    variant = Estimator(variant)
    m, p = Z.shape
    target = semisup_target(X, Y, Z, variant)

    def objective(b):
        return float(np.mean(link.G(Z @ b)) - b @ target)

    def gradient(b):
        return Z.T @ link.g(Z @ b) / m - target

    def hessian(b):
        d = _check_link(link, Z @ b)
        return (Z * d[:, None]).T @ Z / m

    return _newton(objective, gradient, hessian, np.zeros(p), cfg, variant)


def predict(fit: FitResult, link: Link, X0: np.ndarray) -> np.ndarray:
    X0 = np.asarray(X0, dtype=float)
    if fit.estimator is Estimator.NULL:
        return np.full(X0.shape[0], fit.mu0)
    if X0.shape[1] != fit.beta.shape[0]:
        raise ValueError(f"X0 has {X0.shape[1]} columns, fit has {fit.beta.shape[0]}")
    return link.g(X0 @ fit.beta)
