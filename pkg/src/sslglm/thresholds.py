"""Noise thresholds at which the semi-supervised estimators overtake OLS or the null model.

Each setting yields four numbers on a noise scale (sigma^2, or sigma^2/tau^2 in
the random-coefficient setting):

* ``f_*``  lower threshold; above it the estimator beats the supervised fit,
* ``u_*``  upper threshold; below it the estimator beats the null predictor.

The estimator is *effective* on ``(f, u)`` when that interval is nonempty.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .moments import GlmMomentEstimates, MisspecTerms, MomentEstimates, jackknife

NAMES = ("f_tilde", "u_tilde", "f_breve", "u_breve")

# a denominator closer to zero than this many standard errors gives no usable ratio
UNDETERMINED_SE = 3.0


class Scale(str, enum.Enum):
    SIGMA2 = "sigma2"
    NSR = "noise_to_signal"


@dataclass
class ThresholdReport:
    scale: Scale
    f_tilde: float
    u_tilde: float
    f_breve: float
    u_breve: float
    se: dict = field(default_factory=dict)
    null_crossover: float = float("nan")
    closed_form_t: float | None = None
    status: str = "ok"
    approximate: bool = False

    @staticmethod
    def _interval(lo, hi):
        if np.isnan(lo) or np.isnan(hi) or not lo < hi:
            return None
        return (lo, hi)

    @property
    def effective_tilde(self) -> tuple[float, float] | None:
        return self._interval(self.f_tilde, self.u_tilde)

    @property
    def effective_breve(self) -> tuple[float, float] | None:
        return self._interval(self.f_breve, self.u_breve)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in NAMES}


def closed_form_t(Sigma: np.ndarray, n: int, beta: np.ndarray | None = None) -> float:
    """Gaussian-covariate common threshold.

    ``beta' Sigma beta (n-p-1)/p`` for a fixed coefficient, or
    ``tr(Sigma)(n-p-1)/p`` per unit prior variance when ``beta`` is None.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    p = Sigma.shape[0]
    signal = np.trace(Sigma) if beta is None else float(beta @ Sigma @ beta)
    return float(signal * (n - p - 1) / p)


def variance_factors(n: int, p: int) -> tuple[float, float]:
    """n V / sigma^2 for the tilde and breve fits with centred covariates.

    ``V(tilde) = sigma^2 p / n`` and ``V(breve) = sigma^2 p (n-1) / n^2``, so the
    ratio is exactly ``1 - 1/n``.
    """
    return float(p), p * (n - 1) / n


def _finish(fn, ests, scale, closed=None, approximate=False, status="ok") -> ThresholdReport:
    """``fn`` returns (numerators..., denominators..., crossover):
    [Ft_num, Ut, Fb_num, Ub, den_t, den_b, crossover]."""
    def full(*e):
        Ft_num, Ut, Fb_num, Ub, dt, db, cross = fn(*e)
        return np.array([Ft_num / dt, Ut, Fb_num / db, Ub, dt, db, cross])

    val, se = jackknife(full, *ests)
    out = dict(zip(NAMES, val[:4]))
    ses = dict(zip(NAMES, se[:4]))
    for key, d, dse in (("f_tilde", val[4], se[4]), ("f_breve", val[5], se[5])):
        if d <= 0:
            out[key], ses[key] = np.inf, np.nan
        elif not np.isnan(dse) and d < UNDETERMINED_SE * dse:
            out[key] = np.nan
    return ThresholdReport(
        scale=scale, se=ses, null_crossover=float(val[6]), closed_form_t=closed,
        status=status, approximate=approximate, **{k: float(v) for k, v in out.items()},
    )


def thresholds_linear(moments: MomentEstimates, beta: np.ndarray,
                      closed_form: float | None = None) -> ThresholdReport:
    """Thresholds for a true linear model with coefficient ``beta`` (sigma^2 scale)."""
    beta = np.asarray(beta, dtype=float)
    n, p = moments.n, moments.p
    v_t, v_b = variance_factors(n, p)

    def fn(me):
        bMb = beta @ me.M @ beta
        nBb = beta @ me.M_breve @ beta
        bHb = beta @ me.H @ beta
        trQH = me.trQH
        return (bMb, (bHb - bMb) / p,
                nBb, n / (p * (n - 1)) * (bHb - nBb),
                trQH - v_t, trQH - v_b, bHb / trQH)

    return _finish(fn, (moments,), Scale.SIGMA2, closed_form)


def random_beta_breve_bias(me: MomentEstimates) -> float:
    """n B(breve) per unit prior variance, from E[(X'X)^2] and the X'JX variance."""
    n = me.n
    H_inv = me.H_inv
    t_E2 = np.trace(H_inv @ me.E2) - np.trace(me.H)
    return float(((n - 1) / n) ** 2 * t_E2 + np.trace(H_inv @ me.J2) / n**2)


def thresholds_random_beta(moments: MomentEstimates, closed_form: float | None = None) -> ThresholdReport:
    """Thresholds on the noise-to-signal scale for beta ~ N(0, tau^2 I)."""
    n, p = moments.n, moments.p
    v_t, v_b = variance_factors(n, p)

    def fn(me):
        trH = np.trace(me.H)
        num = np.trace(me.H_inv @ me.E2) - trH
        nBb = random_beta_breve_bias(me)
        trQH = me.trQH
        return (num, (2 * trH - np.trace(me.H_inv @ me.E2)) / p,
                nBb, n / (p * (n - 1)) * (trH - nBb),
                trQH - v_t, trQH - v_b, trH / trQH)

    return _finish(fn, (moments,), Scale.NSR, closed_form)


def thresholds_misspecified(terms: MisspecTerms, moments: MomentEstimates) -> ThresholdReport:
    """Thresholds when f has a component outside the linear span. Values may be negative."""
    n, p = moments.n, moments.p
    v_t, v_b = variance_factors(n, p)

    def fn(t, me):
        trQH = me.trQH
        return (n * (t.bias_tilde - t.bias_hat), n / p * (t.bias_null - t.bias_tilde),
                n * (t.bias_breve - t.bias_hat), n / (n - 1) * n / p * (t.bias_null - t.bias_breve),
                trQH - v_t, trQH - v_b, n * (t.bias_null - t.bias_hat) / trQH)

    return _finish(fn, (terms, moments), Scale.SIGMA2)


def thresholds_glm(moments: GlmMomentEstimates) -> ThresholdReport:
    """Quadratic-approximation thresholds for a general link, from moments at beta.

    The out-of-sample losses R(beta) and R(0) are taken from ``moments`` (pool
    averages).  Without ``tr(QH) > tr(H^-1 E[X'X])`` there is no trade-off and
    the lower thresholds are reported as infinite.
    """
    n = moments.n
    status = "ok" if moments.trQH > moments.trH1 else "no bias-variance trade-off"

    def fn(gm):
        trH1 = gm.trH1
        trQH = gm.trQH
        gap = 2 * n * (gm.R_null - gm.R_beta)
        c = (n - 1) / n
        return (gm.var_tilde, (gap - gm.var_tilde) / trH1,
                gm.var_breve, (gap - gm.var_breve) / (c * trH1),
                trQH - trH1, trQH - c * trH1, gap / trQH)

    return _finish(fn, (moments,), Scale.SIGMA2, approximate=True, status=status)
