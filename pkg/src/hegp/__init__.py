"""Heteroscedastic multi-output Gaussian processes.

A three-level model: a smooth multi-output GP, a covariate-indexed
noise covariance built as an inverse mixture of anchored precision
matrices, and a pluggable observation model (exact Gaussian, Student-t
residuals with free or tied scales, probit labels with mislabel mass,
or fixed nonlinear state-space links).  Training runs a variational EM
with closed-form base-matrix updates, nearest-neighbor bandwidths
selected by cross-validation, and an optional sparse approximation.
"""

from .config import FitConfig, SparseConfig
from .data import Dataset
from .exceptions import (
    ConfigError,
    HegpError,
    LinearAlgebraError,
    ParameterError,
    TrainingError,
)
from .gp_core import (
    GaussianDist,
    Kernel,
    MeanFunction,
    MultiOutputCov,
    gaussian_condition,
    gaussian_kl,
    gaussian_logpdf,
    gram,
)
from .precision import (
    PrecisionMixture,
    PrecisionPrior,
    bandwidths_from_percent,
    default_anchors,
)
from .predictors import (
    CvMReport,
    FittedModel,
    chi_square_cdf,
    cvm_score_from_uniforms,
    outlier_weights,
    precision_rescale,
    select_outlier_scale,
)
from .simbench import (
    EvalReport,
    GroundTruth,
    compare_methods,
    evaluate_classification,
    evaluate_regression,
    label_kl,
    mean_kl_divergence,
    residual_calibration,
    simulate,
)
from .sparse import SparseOps, nystrom_cov, vfe_elbo_correction
from .third_level import (
    IdentityGaussian,
    ProbitClassifier,
    StateSpaceLink,
    StudentTObservation,
    affine_term,
    exp_term,
    power_term,
)
from .vem import (
    EMState,
    GPParams,
    MStepKernels,
    VariationalState,
    estep,
    evidence_bound,
    fit,
    fit_exact_gaussian,
    initialize,
    select_bandwidth_percent,
    update_base_matrices,
    update_gp_params,
    update_gp_params_joint,
    upsilon_joint_gradient,
)

__version__ = "0.1.0"
