"""Post-processing toolkit for MCMC output.

Convergence diagnostics and burn-in/thinning, kernel-discrepancy-based
compression and bias correction of sample paths, and gradient-based
control variates for estimating posterior expectations.
"""

from .chain import (
    ChainOutput,
    DiagnosticReport,
    WeightedSupport,
    autocorrelation,
    burn_in_from_rhat,
    ess,
    fixed_thin,
    load_chain_csv,
    mala_sample,
    r_hat,
    remove_burn_in,
    rwmh_sample,
    save_chain_csv,
    select_thinning_lag,
    with_gradients,
)
from .cv import (
    EstimateReport,
    IntegrandEvals,
    PolynomialBasisSpec,
    cf_estimate,
    cross_validate_kernel,
    empirical_variance,
    evaluate_integrand,
    least_squares_proxy,
    secf_estimate,
    stein_monomial,
    vanilla_estimate,
    zvcv_estimate,
)
from .errors import (
    ConditioningError,
    DegenerateSeriesError,
    NumericalError,
    SteinPostError,
    ValidationError,
)
from .model import (
    GaussianMixtureSpec,
    TargetModel,
    benchmark_mixture,
    gaussian_target,
    grad_check,
    mixture_target,
    target_from_json,
)
from .stein import (
    BaseKernelConfig,
    SteinKernelConfig,
    base_kernel_derivs,
    kernel_from_json,
    ksd,
    median_heuristic,
    stein_gram,
    stein_kernel_eval,
)
from .thin import IqpInstance, ThinningResult, solve_iqp, stein_thin, stein_thin_nonmyopic

__version__ = "0.1.0"
