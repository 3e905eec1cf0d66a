from .config import BlobSpec, DatasetSpec, ExperimentConfig, TargetFamily
from .figures import emit_boxplot_data, emit_heatmap
from .pipeline import (
    evaluate_grid,
    generate_perturbation_set,
    load_experiment_data,
    run_experiment,
    run_phases,
    select_sources,
    spot_check,
    train_ensemble,
    verify_manifest,
)

__all__ = [
    "BlobSpec",
    "DatasetSpec",
    "ExperimentConfig",
    "TargetFamily",
    "emit_boxplot_data",
    "emit_heatmap",
    "evaluate_grid",
    "generate_perturbation_set",
    "load_experiment_data",
    "run_experiment",
    "run_phases",
    "select_sources",
    "spot_check",
    "train_ensemble",
    "verify_manifest",
]
