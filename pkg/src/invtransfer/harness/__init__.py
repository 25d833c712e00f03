"""Configuration, persistence, experiment runners and the command line."""
from .config import ExperimentConfig, config_schema, dump_config, load_config
from .experiment import (
    MetricsRecord,
    StageError,
    fit_loglog_slope,
    run_baselines,
    run_experiment,
    sweep_m,
)
from .io import (
    dataset_from_csv,
    dataset_to_csv,
    dumps_model,
    load_model,
    loads_model,
    read_dataset,
    save_model,
    write_dataset,
)

__all__ = [
    "ExperimentConfig",
    "MetricsRecord",
    "StageError",
    "config_schema",
    "dataset_from_csv",
    "dataset_to_csv",
    "dump_config",
    "dumps_model",
    "fit_loglog_slope",
    "load_config",
    "load_model",
    "loads_model",
    "read_dataset",
    "run_baselines",
    "run_experiment",
    "save_model",
    "sweep_m",
    "write_dataset",
]
