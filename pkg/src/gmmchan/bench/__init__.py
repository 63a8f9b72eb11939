"""Config-driven experiment harness."""

from .config import ESTIMATORS, ExperimentConfig, load_config, parse_config
from .experiments import (
    fit_and_cache_models, report_param_counts, run_component_sweep, run_mse_sweep,
    run_responsibility_count, run_training_size_sweep,
)
