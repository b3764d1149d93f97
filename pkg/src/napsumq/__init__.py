"""Differentially private synthetic data with noise-aware posterior inference
and multiple-imputation analysis."""

from napsumq.estimators import NapsuMQ, PGMGenerator
from napsumq.med import MEDFamily, MEDModel, fit_pgm_mle, log_partition, moments, sample
from napsumq.mi_analysis import (
    AnalysisResult,
    CombinedEstimate,
    LogisticRegressionIRLS,
    combine,
    drop_outlier_variances,
    interval,
    logistic_fit,
)
from napsumq.pipeline import (
    PipelineConfig,
    run_coverage_experiment,
    run_mi_analysis,
    run_napsu_mq,
)
from napsumq.privacy import (
    NoisyRelease,
    PrivacyBudget,
    calibrate_sigma,
    delta_of,
    gaussian_mechanism,
)
from napsumq.queries import (
    MarginalQuery,
    QueryCollection,
    canonicalize,
    evaluate,
    evaluate_dataset,
    full_marginal_set,
    full_marginal_sets,
    sensitivity,
)
from napsumq.schema import Dataset, Schema, Variable, load_csv

__version__ = "0.1.0"

__all__ = [
    "AnalysisResult",
    "CombinedEstimate",
    "Dataset",
    "LogisticRegressionIRLS",
    "MEDFamily",
    "MEDModel",
    "MarginalQuery",
    "NapsuMQ",
    "NoisyRelease",
    "PGMGenerator",
    "PipelineConfig",
    "PrivacyBudget",
    "QueryCollection",
    "Schema",
    "Variable",
    "calibrate_sigma",
    "canonicalize",
    "combine",
    "delta_of",
    "drop_outlier_variances",
    "evaluate",
    "evaluate_dataset",
    "fit_pgm_mle",
    "full_marginal_set",
    "full_marginal_sets",
    "gaussian_mechanism",
    "interval",
    "load_csv",
    "log_partition",
    "logistic_fit",
    "moments",
    "run_coverage_experiment",
    "run_mi_analysis",
    "run_napsu_mq",
    "sample",
    "sensitivity",
]
