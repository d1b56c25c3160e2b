"""Sparse tensor completion with subgroup nested factors.

A latent factor row per subject plus a shared nested row per subgroup, per
mode; fit by cyclic ridge updates that commit only the best-improving block
per step.  Includes comparison baselines, synthetic data generators, a
tuning/benchmark harness, and a command-line front end.
"""

__version__ = "0.1.0"

from .tensor_core import (DatasetSplit, ObservationSet, ScalingInfo,
                          SparseTensor, TensorFormatError, TensorSchema,
                          apply_scaling, invert_scaling, load_sparse_tensor,
                          mode_observations, save_sparse_tensor,
                          split_dataset, standardize_by_group)
from .factor_model import (FactorModel, IndeterminacyTransform,
                           ModelFormatError, SubgroupMap,
                           apply_indeterminacy, identifiability_check,
                           kruskal_rank, load_model, load_subgroup_map,
                           penalized_loss, predict_entries, predict_entry,
                           rearrange_columns, save_model, save_subgroup_map)
from .rem_solver import (BlockSystem, FitConfig, FitResult, NumericalError,
                         assemble_block_system, block_improvement, fit_rem,
                         save_run_log, update_latent_block,
                         update_nested_block)
from .baselines import (GcpdResult, GrandMean, MfResult, fit_cpd, fit_gcpd,
                        fit_mf, grand_mean_baseline)
from .simgen import (GroundTruth, Sim1Params, Sim2Params,
                     generate_simulation1, generate_simulation2,
                     inject_cold_start, replication_seeds)
from .evalbench import (BenchmarkReport, BenchmarkSpec, mae, rmse,
                        run_benchmark, tune_lambda)

__all__ = [
    "SparseTensor", "ObservationSet", "ScalingInfo", "DatasetSplit",
    "TensorSchema", "TensorFormatError", "load_sparse_tensor",
    "save_sparse_tensor", "mode_observations", "standardize_by_group",
    "apply_scaling", "invert_scaling", "split_dataset",
    "SubgroupMap", "FactorModel", "IndeterminacyTransform",
    "ModelFormatError", "predict_entry", "predict_entries", "penalized_loss",
    "rearrange_columns", "apply_indeterminacy", "kruskal_rank",
    "identifiability_check", "save_model", "load_model", "save_subgroup_map",
    "load_subgroup_map",
    "FitConfig", "BlockSystem", "FitResult", "NumericalError",
    "assemble_block_system", "update_latent_block", "update_nested_block",
    "block_improvement", "fit_rem", "save_run_log",
    "GcpdResult", "MfResult", "GrandMean", "fit_cpd", "fit_gcpd", "fit_mf",
    "grand_mean_baseline",
    "Sim1Params", "Sim2Params", "GroundTruth", "generate_simulation1",
    "generate_simulation2", "inject_cold_start", "replication_seeds",
    "BenchmarkSpec", "BenchmarkReport", "rmse", "mae", "tune_lambda",
    "run_benchmark",
]
