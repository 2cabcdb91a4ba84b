"""Statistical process monitoring for multivariate functional data.

Building blocks: B-spline bases (:mod:`funmon.basis`), penalized smoothing
(:mod:`funmon.smoothing`), multivariate functional PCA (:mod:`funmon.mfpca`)
and T2/SPE control charts (:mod:`funmon.monitoring`), plus the
covariate-adjusted (:mod:`funmon.frcc`), robust (:mod:`funmon.robust`),
real-time (:mod:`funmon.frtm`) and adaptive (:mod:`funmon.adaptive`)
extensions, a seeded simulator (:mod:`funmon.simulate`) and file formats
(:mod:`funmon.io`).
"""

__version__ = "0.1.0"

from .basis import BasisSystem, build_basis, evaluate_design
from .smoothing import (
    DiscreteProfile,
    SmoothFit,
    distribute_lambda,
    fit_penalized,
    gcv_score,
    select_lambda,
)
from .mfpca import (
    FunctionalSample,
    MfpcaModel,
    StandardizationModel,
    fit_mfpca,
    fit_standardization,
    sample_from_profiles,
    scores,
    select_L,
    standardize,
    truncate,
    unstandardize,
)
from .monitoring import (
    MonitoringModel,
    MonitoringOutcome,
    contributions,
    phase1_fit,
    phase2_evaluate,
    spe_statistic,
    t2_statistic,
)

__all__ = [
    "__version__",
    "BasisSystem",
    "build_basis",
    "evaluate_design",
    "DiscreteProfile",
    "SmoothFit",
    "fit_penalized",
    "gcv_score",
    "select_lambda",
    "distribute_lambda",
    "FunctionalSample",
    "StandardizationModel",
    "MfpcaModel",
    "sample_from_profiles",
    "fit_standardization",
    "standardize",
    "unstandardize",
    "fit_mfpca",
    "scores",
    "truncate",
    "select_L",
    "MonitoringModel",
    "MonitoringOutcome",
    "t2_statistic",
    "spe_statistic",
    "contributions",
    "phase1_fit",
    "phase2_evaluate",
]
