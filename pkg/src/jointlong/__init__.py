"""Joint longitudinal models for a noisy biomarker and a bounded outcome.

The package fits two Bayesian joint models by a nested Laplace scheme
and turns the fits into an interpretable marginal association
coefficient between the biomarker and the outcome, optionally lagged in
time. See the README for the command line interface.
"""

from .association import AssocQuery, AssocResult, SurfaceResult, assoc_surface, beta_joint, marginal_mean
from .errors import (
    ConfigError,
    DataError,
    DegenerateCovarianceError,
    DomainError,
    JointlongError,
    NumericError,
)
from .estimation import FitControl, FitResult, fit, inner_mode, joint_log_posterior, log_marginal_hyper
from .gaussian import MvnDist, build_cov_v, condition, derive_rng, sample_mvn, wishart_logpdf
from .model import (
    DesignRecipe,
    Family,
    HyperVector,
    LatentField,
    Link,
    LongDataset,
    ModelKind,
    ModelSpec,
    PriorConfig,
    Process,
    SubjectRecord,
    inverse_link,
    linear_predictor,
    obs_loglik,
)
from .modeleval import FitDiagnostics, compute_diagnostics
from .simgen import (
    RepRecord,
    SimConfig,
    StudyConfig,
    StudyReport,
    generate,
    run_study,
    spec_for,
    true_association_curve,
)

__version__ = "0.1.0"

__all__ = [
    "AssocQuery",
    "AssocResult",
    "SurfaceResult",
    "ConfigError",
    "DataError",
    "DegenerateCovarianceError",
    "DesignRecipe",
    "DomainError",
    "Family",
    "FitControl",
    "FitDiagnostics",
    "FitResult",
    "HyperVector",
    "JointlongError",
    "LatentField",
    "Link",
    "LongDataset",
    "ModelKind",
    "ModelSpec",
    "MvnDist",
    "NumericError",
    "PriorConfig",
    "Process",
    "RepRecord",
    "SimConfig",
    "StudyConfig",
    "StudyReport",
    "SubjectRecord",
    "assoc_surface",
    "beta_joint",
    "build_cov_v",
    "compute_diagnostics",
    "condition",
    "derive_rng",
    "fit",
    "generate",
    "inner_mode",
    "inverse_link",
    "joint_log_posterior",
    "linear_predictor",
    "log_marginal_hyper",
    "marginal_mean",
    "obs_loglik",
    "run_study",
    "sample_mvn",
    "spec_for",
    "true_association_curve",
    "wishart_logpdf",
]
