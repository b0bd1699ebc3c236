"""Experiment orchestration: configuration, trials, statistics and export."""

from .config import (
    FIELD_NAMES,
    MASKS,
    RANDOM_SETTINGS,
    SETTINGS,
    ConfigError,
    ExperimentConfig,
    from_mapping,
    load_config,
    parse_override,
)
from .experiment import (
    CheckReport,
    dense_oracle_check,
    CheckRow,
    GridResult,
    default_jobs,
    hypergrad_check,
    map_trials,
    run_experiment,
    sensitivity_grid,
)
from .export import export, format_table, load_records, summarise, write_cdf
from .stats import batch_best_of_k, bootstrap_stats, empirical_cdf, outcome_values
from .trial import Prepared, RunRecord, TrialSeeds, prepare, run_trial, sample_init, trial_seeds

__all__ = [
    "FIELD_NAMES", "MASKS", "RANDOM_SETTINGS", "SETTINGS", "ConfigError", "ExperimentConfig",
    "from_mapping", "load_config", "parse_override", "CheckReport", "CheckRow", "GridResult",
    "default_jobs", "dense_oracle_check", "hypergrad_check", "map_trials", "run_experiment", "sensitivity_grid",
    "export", "format_table", "load_records", "summarise", "write_cdf", "batch_best_of_k",
    "bootstrap_stats", "empirical_cdf", "outcome_values", "Prepared", "RunRecord", "TrialSeeds",
    "prepare", "run_trial", "sample_init", "trial_seeds",
]
