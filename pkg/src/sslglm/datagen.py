"""Covariates, mean functions and noisy responses for the simulation scenarios.

Covariates come from a block-correlated Gaussian vector, optionally pushed
through a Gaussian copula so that the marginals become Uniform or t(8).  All
three families are standardised to zero mean and unit marginal variance.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.interpolate import CubicSpline

from ._rng import SeedLike, as_generator
from .links import Identity, Link

FAMILIES = ("gaussian", "uniform", "t8")

# marginal fourth moments of the standardised families
FOURTH_MOMENTS = {"gaussian": 3.0, "uniform": 1.8, "t8": 4.5}

_T_DOF = 8
_T_SCALE = np.sqrt((_T_DOF - 2) / _T_DOF)
_UNIFORM_HALF_WIDTH = np.sqrt(3.0)


class ConfigurationError(ValueError):
    """Invalid model or scenario configuration."""


@dataclass(frozen=True)
class CovariateModel:
    p: int
    family: str = "gaussian"
    blocks: int = 1
    rho: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(
                f"unknown covariate family {self.family!r}; expected one of {FAMILIES}"
            )
        if self.p < 1 or self.blocks < 1:
            raise ConfigurationError("p and blocks must be positive")
        if self.p % self.blocks:
            raise ConfigurationError(f"p={self.p} is not divisible by blocks={self.blocks}")
        s = self.block_size
        lower = -1.0 / (s - 1) if s > 1 else -np.inf
        if not (lower < self.rho < 1.0) and s > 1:
            raise ConfigurationError(
                f"rho={self.rho} makes the block covariance singular or indefinite "
                f"(need {lower:.4g} < rho < 1 for blocks of size {s})"
            )

    @property
    def block_size(self) -> int:
        return self.p // self.blocks

    @property
    def fourth_moment(self) -> float:
        return FOURTH_MOMENTS[self.family]

    def latent_covariance(self) -> np.ndarray:
        """Covariance of the underlying Gaussian vector (the covariance of x itself
        only for the Gaussian family)."""
        s = self.block_size
        block = np.full((s, s), self.rho) + (1.0 - self.rho) * np.eye(s)
        return np.kron(np.eye(self.blocks), block)

    @functools.cached_property
    def _chol(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.latent_covariance())
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("block covariance is not positive definite") from exc


def _t8_of_normal_exact(z: np.ndarray) -> np.ndarray:
    # evaluate on the lower tail and reflect, so ndtr never rounds to 1
    z = np.asarray(z, dtype=float)
    return np.sign(z) * -special.stdtrit(_T_DOF, special.ndtr(-np.abs(z)))


@functools.lru_cache(maxsize=1)
def _t8_spline() -> tuple[CubicSpline, float]:
    # the copula map z -> F_t8^{-1}(Phi(z)) is smooth and monotone; tabulating it
    # once is ~100x faster than inverting the incomplete beta per draw
    half = 8.0
    knots = np.linspace(-half, half, 16 * 1024 + 1)
    return CubicSpline(knots, _t8_of_normal_exact(knots)), half


def t8_of_normal(z: np.ndarray) -> np.ndarray:
    """Map standard-normal draws to t(8) draws with the same quantile."""
    z = np.asarray(z, dtype=float)
    spline, half = _t8_spline()
    out = spline(np.clip(z, -half, half))
    outside = np.abs(z) > half
    if np.any(outside):
        out[outside] = _t8_of_normal_exact(z[outside])
    return out


def _apply_marginals(family: str, g: np.ndarray) -> np.ndarray:
    if family == "gaussian":
        return g
    if family == "uniform":
        # 2 Phi(z) - 1 == erf(z / sqrt 2), which keeps precision in both tails
        return _UNIFORM_HALF_WIDTH * special.erf(g / np.sqrt(2.0))
    return _T_SCALE * t8_of_normal(g)


def sample_covariates(model: CovariateModel, rows: int, seed: SeedLike = None) -> np.ndarray:
    """Draw ``rows`` i.i.d. covariate vectors from ``model``."""
    rng = as_generator(seed)
    g = rng.standard_normal((rows, model.p))
    if model.rho != 0.0 and model.block_size > 1:
        g = g @ model._chol.T
    return _apply_marginals(model.family, g)


# ---------------------------------------------------------------------------
# mean functions


@dataclass(frozen=True)
class ConstantBeta:
    """f(x) = b * sum_j x_j."""

    b: float

    def linear_coef(self, p: int) -> np.ndarray:
        return np.full(p, float(self.b))

    def nonlinear(self, X: np.ndarray) -> np.ndarray:
        return np.zeros(X.shape[0])


@dataclass(frozen=True)
class RandomBeta:
    """f(x) = x'beta with beta ~ N(0, tau2 I), redrawn per training set."""

    tau2: float = 1.0

    def __post_init__(self):
        if self.tau2 < 0:
            raise ConfigurationError("tau2 must be non-negative")

    def nonlinear(self, X: np.ndarray) -> np.ndarray:
        return np.zeros(X.shape[0])


@dataclass(frozen=True)
class Misspecified:
    """f(x) = sum_j (b x_j + delta |x_j|); the |x| part is invisible to a linear fit."""

    b: float
    delta: float

    def linear_coef(self, p: int) -> np.ndarray:
        return np.full(p, float(self.b))

    def nonlinear(self, X: np.ndarray) -> np.ndarray:
        return self.delta * np.abs(X).sum(axis=1)


@dataclass(frozen=True, eq=False)
class GlmLink:
    """f(x) = g(x'beta) for a link g."""

    beta: np.ndarray
    link: Link = field(default_factory=Identity)

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())

    def linear_coef(self, p: int) -> np.ndarray:
        if self.beta.shape[0] != p:
            raise ConfigurationError(f"beta has length {self.beta.shape[0]}, expected {p}")
        return self.beta


MeanModel = ConstantBeta | RandomBeta | Misspecified | GlmLink


def eval_mean(model: MeanModel, X: np.ndarray, beta: np.ndarray | None = None) -> np.ndarray:
    """Evaluate f(x_i) for every row of ``X``.

    ``beta`` is the realised coefficient vector for :class:`RandomBeta` and is
    ignored otherwise.
    """
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    if isinstance(model, RandomBeta):
        if beta is None:
            raise ValueError("RandomBeta needs a realised beta; see draw_beta")
        return X @ np.asarray(beta, dtype=float)
    if isinstance(model, GlmLink):
        return model.link.g(X @ model.linear_coef(p))
    return X @ model.linear_coef(p) + model.nonlinear(X)


def draw_beta(prior: RandomBeta, p: int, seed: SeedLike = None) -> np.ndarray:
    rng = as_generator(seed)
    return np.sqrt(prior.tau2) * rng.standard_normal(p)


def gen_response(f_values: np.ndarray, sigma2: float, seed: SeedLike = None) -> np.ndarray:
    """y = f + eps with Gaussian eps of variance ``sigma2``."""
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be non-negative, got {sigma2}")
    f_values = np.asarray(f_values, dtype=float)
    rng = as_generator(seed)
    return f_values + np.sqrt(sigma2) * rng.standard_normal(f_values.shape)


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    sigma2: float

    def __post_init__(self):
        n, p = self.X.shape
        if n <= p:
            raise ConfigurationError(f"need n > p, got n={n}, p={p}")
        if self.Z.shape[1] != p or self.Y.shape != (n,):
            raise ConfigurationError("X, Y and Z shapes disagree")
