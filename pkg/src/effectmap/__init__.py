"""Subject-level effect maps from binary classifiers.

The package turns a trained case/control classifier into per-subject
maps of where a condition shows in the measurements: raw per-site
effect scores, bootstrap noise estimates, a graph-regularized MAP
reconstruction, FPR-budgeted thresholding into binary detection maps,
and an evaluation harness with synthetic ground-truth benchmarks.
"""

from importlib.metadata import PackageNotFoundError, version

from .baseline import NormativeModel, fit_normative, nbs_map, outlier_score_map, wbs_map
from .classifiers import CLASSIFIER_KINDS, load_model_json, raw_effect_map, save_model_json, train_model, tune_regularization
from .core import (
    BinaryEffectMap,
    Dataset,
    EffectMap,
    NeighborhoodGraph,
    Sample,
    build_grid_graph,
    load_dataset_csv,
    load_graph_edgelist,
    save_dataset_csv,
    save_graph_edgelist,
)
from .estimation import (
    BootstrapEnsemble,
    NoiseEstimate,
    PriorParams,
    estimate_noise_and_mean,
    estimate_prior_params,
    load_prior_params,
    save_prior_params,
    stratified_bootstrap,
)
from .estimator import EffectMapReconstructor
from .evaluation import (
    METHODS,
    ExperimentConfig,
    ExperimentReport,
    aux_marker_study,
    config_hash,
    dsc,
    fpr,
    group_t_stat,
    occurrence_map,
    pearson_corr,
    run_experiment,
    save_report,
)
from .reconstruct import (
    RsmConfig,
    assemble_system,
    prepare_reconstruction,
    reconstruct_for_sample,
    reconstruct_prepared,
    solve_map,
)
from .synthdata import SynthConfig, generate_dataset
from .thresholding import (
    Threshold,
    compute_threshold,
    cv_threshold,
    golden_section_threshold,
    threshold_map,
)

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "BinaryEffectMap",
    "BootstrapEnsemble",
    "CLASSIFIER_KINDS",
    "Dataset",
    "EffectMap",
    "EffectMapReconstructor",
    "ExperimentConfig",
    "ExperimentReport",
    "METHODS",
    "NeighborhoodGraph",
    "NoiseEstimate",
    "NormativeModel",
    "PriorParams",
    "RsmConfig",
    "Sample",
    "SynthConfig",
    "Threshold",
    "assemble_system",
    "aux_marker_study",
    "build_grid_graph",
    "compute_threshold",
    "config_hash",
    "cv_threshold",
    "dsc",
    "estimate_noise_and_mean",
    "estimate_prior_params",
    "fit_normative",
    "fpr",
    "generate_dataset",
    "golden_section_threshold",
    "group_t_stat",
    "load_dataset_csv",
    "load_graph_edgelist",
    "load_model_json",
    "load_prior_params",
    "nbs_map",
    "occurrence_map",
    "outlier_score_map",
    "pearson_corr",
    "prepare_reconstruction",
    "raw_effect_map",
    "reconstruct_for_sample",
    "reconstruct_prepared",
    "run_experiment",
    "save_dataset_csv",
    "save_graph_edgelist",
    "save_model_json",
    "save_prior_params",
    "save_report",
    "solve_map",
    "stratified_bootstrap",
    "threshold_map",
    "train_model",
    "tune_regularization",
    "wbs_map",
]
