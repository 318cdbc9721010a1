"""Semi-supervised ERM for linear and generalized linear regression.

Estimators that borrow covariate moments from unlabelled data, Monte Carlo
estimates of the noise thresholds where they beat OLS and the null model, and
a replicated-simulation harness for their risk curves.
"""

from .datagen import (
    ConfigurationError,
    ConstantBeta,
    CovariateModel,
    Dataset,
    GlmLink,
    Misspecified,
    RandomBeta,
    draw_beta,
    eval_mean,
    gen_response,
    sample_covariates,
)
from .estimators import (
    ConvergenceError,
    Estimator,
    FitResult,
    SolverConfig,
    fit_glm,
    fit_glm_semisup,
    fit_null,
    fit_ols_breve,
    fit_ols_hat,
    fit_ols_tilde,
    null_mu0,
    predict,
)
from .links import Elu, Identity, make_link
from .moments import McConfig, MomentEstimates, estimate_glm_moments, estimate_moments
from .risk import RiskCurve, Scenario, run_replicates
from .thresholds import ThresholdReport, thresholds_glm, thresholds_linear, thresholds_random_beta

__version__ = "0.1.0"
