"""Conformal regression with locally rescaled nonconformity scores.

Provides jackknife+ intervals whose widths adapt to local error scale
via kernel score means, split/MADSplit baselines, adaptivity metrics,
mutual-information diagnostics with kernel tuning, and a benchmark CLI.
"""

from .conformal import (
    CalibrationState,
    PredictionInterval,
    calibrate_jkplus,
    calibrate_madsplit,
    calibrate_split,
    conformal_quantile,
    predict_batch,
    predict_interval,
)
from .data import Dataset, ModelOutputs, RiskLevel, SplitSpec, load_dataset, save_dataset, split
from .information import (
    CoverageBound,
    TuningParams,
    cantelli_threshold,
    ksg_mutual_information,
    local_coverage_bound,
    markov_coverage,
    mi_objective,
    tune_kernel,
)
from .kernels import DegenerateKernelWarning, KernelSpec, nw_mean_at, nw_weights
from .metrics import (
    EvaluationReport,
    coverage,
    evaluate,
    kendall_tau,
    oracle_is_ratio,
    r2_sqi,
    sqi_bins,
    tau_si,
    tau_sqi,
)
from .synthetic import BinnedMean, KNNRegressor, Synth1DParams, generate_1d

__version__ = "0.1.0"

__all__ = [
    "BinnedMean",
    "CalibrationState",
    "CoverageBound",
    "Dataset",
    "DegenerateKernelWarning",
    "EvaluationReport",
    "KNNRegressor",
    "KernelSpec",
    "ModelOutputs",
    "PredictionInterval",
    "RiskLevel",
    "SplitSpec",
    "Synth1DParams",
    "TuningParams",
    "calibrate_jkplus",
    "calibrate_madsplit",
    "calibrate_split",
    "cantelli_threshold",
    "conformal_quantile",
    "coverage",
    "evaluate",
    "generate_1d",
    "kendall_tau",
    "ksg_mutual_information",
    "load_dataset",
    "local_coverage_bound",
    "markov_coverage",
    "mi_objective",
    "nw_mean_at",
    "nw_weights",
    "oracle_is_ratio",
    "predict_batch",
    "predict_interval",
    "r2_sqi",
    "save_dataset",
    "split",
    "sqi_bins",
    "tau_si",
    "tau_sqi",
    "tune_kernel",
]
