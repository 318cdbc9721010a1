"""Data-driven choice between the supervised fit, the breve estimator and the null model.

The labelled sample gives a noise estimate; it is compared against lower and
upper breve thresholds, evaluated either at the breve fit itself (fixed
coefficient, with a bias correction for the quadratic forms) or under the
random-coefficient prior on the noise-to-signal scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimators import Estimator
from .links import Link
from .moments import McConfig, MomentEstimates, estimate_glm_moments, estimate_glm_sigma_trace
from .thresholds import Scale, ThresholdReport, thresholds_glm, variance_factors


@dataclass
class AdaptiveDecision:
    chosen: Estimator
    sigma2_hat: float
    thresholds_used: ThresholdReport
    tau2_hat: float | None = None
    nsr_hat: float | None = None
    raw_thresholds: ThresholdReport | None = None

    @property
    def estimate(self) -> float:
        """The noise statistic that was compared with the thresholds."""
        return self.nsr_hat if self.thresholds_used.scale is Scale.NSR else self.sigma2_hat


def sigma2_hat_linear(X: np.ndarray, Y: np.ndarray, beta_hat: np.ndarray) -> float:
    """RSS / (n - p)."""
    n, p = X.shape
    r = Y - X @ beta_hat
    return float(r @ r / (n - p))


def nsr_hat(X: np.ndarray, Y: np.ndarray, traceH1: float, beta_hat: np.ndarray | None = None):
    """(sigma2_hat, tau2_hat, sigma2_hat / tau2_hat) with ``traceH1 = tr(E[x x'])``."""
    if not traceH1 > 0:
        raise ValueError("tr(E[xx']) must be positive")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if beta_hat is None:
        beta_hat = np.linalg.lstsq(X, Y, rcond=None)[0]
    s2 = sigma2_hat_linear(X, Y, beta_hat)
    t2 = max((float(Y @ Y) / len(Y) - s2) / traceH1, 0.0)
    nsr = s2 / t2 if t2 > 0 else np.inf
    return s2, t2, nsr


def sigma2_hat_glm(X, Y, beta_hat, breve_beta, link: Link, Z, cfg: McConfig = McConfig(B=200),
                   batch: np.ndarray | None = None, trace: float | None = None) -> float:
    """RSS(hat) over a degrees-of-freedom correction evaluated at the breve fit.

    The denominator ``n - 2p + tr(E[X'X (X'DX)^-1 X'D^2X (X'DX)^-1])`` is
    floored at 1.  A precomputed ``trace`` skips the Monte Carlo step.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    r = np.asarray(Y, dtype=float) - link.g(X @ beta_hat)
    if link.is_identity:
        trace = float(p)
    elif trace is None:
        trace = estimate_glm_sigma_trace(Z, n, cfg, breve_beta, link, batch=batch)
    return float(r @ r / max(n - 2 * p + trace, 1.0))


def plugin_forms(moments: MomentEstimates, beta_breve: np.ndarray, sigma2_hat, correct: bool = True):
    """Plug-in quadratic forms (b'Mb, b'M_breve b, b'Hb) for one or many breve fits.

    A quadratic form b'Ab at an unbiased estimate overshoots by tr(A Cov(b));
    with ``correct`` the noise part of that covariance,
    ``sigma2_hat H^-1 E[X'C_n X] H^-1``, is subtracted and the result floored at 0.
    ``beta_breve`` may be ``(p,)`` or ``(N, p)`` with ``sigma2_hat`` of shape ``(N,)``.
    """
    b = np.asarray(beta_breve, dtype=float)
    s2 = np.asarray(sigma2_hat, dtype=float)
    H_inv = np.linalg.inv(moments.H)
    base = H_inv @ moments.C @ H_inv
    out = []
    for A in (moments.M, moments.M_breve, moments.H):
        v = np.einsum("...i,ij,...j->...", b, A, b)
        if correct:
            v = np.maximum(v - s2 * np.sum(A * base), 0.0)
        out.append(v)
    return tuple(out)


def plugin_thresholds_many(moments: MomentEstimates, beta_breve, sigma2_hat, correct: bool = True):
    """Arrays (f_tilde, u_tilde, f_breve, u_breve, null_crossover) for plug-in breve fits."""
    n, p = moments.n, moments.p
    bMb, nBb, bHb = plugin_forms(moments, beta_breve, sigma2_hat, correct)
    trQH = moments.trQH
    d_t, d_b = (trQH - v for v in variance_factors(n, p))
    f_t = bMb / d_t if d_t > 0 else np.full_like(bMb, np.inf)
    f_b = nBb / d_b if d_b > 0 else np.full_like(nBb, np.inf)
    return f_t, (bHb - bMb) / p, f_b, n / (p * (n - 1)) * (bHb - nBb), bHb / trQH


def plugin_thresholds(moments: MomentEstimates, beta_breve: np.ndarray, sigma2_hat: float,
                      correct: bool = True) -> ThresholdReport:
    """Fixed-coefficient thresholds with beta replaced by its breve estimate."""
    vals = plugin_thresholds_many(moments, beta_breve, sigma2_hat, correct)
    f_t, u_t, f_b, u_b, cross = (float(v) for v in vals)
    return ThresholdReport(scale=Scale.SIGMA2, f_tilde=f_t, u_tilde=u_t, f_breve=f_b, u_breve=u_b,
                           null_crossover=cross)


def select_many(f_breve, u_breve, null_crossover, estimate) -> np.ndarray:
    """Vectorised :func:`select`; returns an array of estimator names."""
    f, u, cross, est = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in
                                             (f_breve, u_breve, null_crossover, estimate)))
    usable = ~np.isnan(f) & ~np.isnan(u) & (f < u)
    banded = np.where(est <= f, Estimator.HAT.value,
                      np.where(est <= u, Estimator.BREVE.value, Estimator.NULL.value))
    fallback = np.where(est <= cross, Estimator.HAT.value, Estimator.NULL.value)
    return np.where(usable, banded, fallback)


def select(thresholds: ThresholdReport, estimate: float) -> Estimator:
    """Pick hat, breve or null from a noise estimate on the thresholds' scale.

    Ties go to the simpler side: hat at the lower threshold, breve at the upper.
    If the breve interval is empty or undetermined, hat is kept up to the point
    where its risk meets the null model's.
    """
    t = thresholds
    return Estimator(str(select_many(t.f_breve, t.u_breve, t.null_crossover, estimate)))


def decide_fixed(X, Y, beta_hat, beta_breve, moments: MomentEstimates) -> AdaptiveDecision:
    """Decision for a fixed (possibly misspecified) mean, on the sigma^2 scale."""
    s2 = sigma2_hat_linear(X, Y, beta_hat)
    used = plugin_thresholds(moments, beta_breve, s2)
    raw = plugin_thresholds(moments, beta_breve, s2, correct=False)
    return AdaptiveDecision(select(used, s2), s2, used, raw_thresholds=raw)


def decide_random(X, Y, beta_hat, report: ThresholdReport, traceH1: float) -> AdaptiveDecision:
    """Decision under a random-coefficient prior, on the noise-to-signal scale."""
    s2, t2, nsr = nsr_hat(X, Y, traceH1, beta_hat)
    return AdaptiveDecision(select(report, nsr), s2, report, tau2_hat=t2, nsr_hat=nsr)


def decide_glm(X, Y, Z, beta_hat, beta_breve, link: Link, cfg: McConfig = McConfig(B=200, groups=1),
               batch: np.ndarray | None = None) -> AdaptiveDecision:
    """GLM decision: dedicated noise estimate and approximate thresholds at the breve fit."""
    n = X.shape[0]
    gm = estimate_glm_moments(Z, n, cfg, beta_breve, link, batch=batch)
    s2 = sigma2_hat_glm(X, Y, beta_hat, beta_breve, link, Z, cfg, trace=gm.sigma_trace)
    report = thresholds_glm(gm)
    return AdaptiveDecision(select(report, s2), s2, report)
