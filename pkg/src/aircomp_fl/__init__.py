from aircomp_fl.core import (
    RngStreams,
    ScenarioConfig,
    default_config,
    derive_stream,
    load_config,
    validate_config,
)
from aircomp_fl.errors import AircompError
from aircomp_fl.experiments import (
    AggregationPolicy,
    ExperimentResult,
    create_policy,
    run_experiment,
    run_iteration,
    run_sweep,
)
from aircomp_fl.learning import TaskModel, create_task
from aircomp_fl.reports import emit_reports
from aircomp_fl.scheduler import brute_force_oracle, solve_p4

__all__ = [
    "AggregationPolicy",
    "AircompError",
    "ExperimentResult",
    "RngStreams",
    "ScenarioConfig",
    "TaskModel",
    "brute_force_oracle",
    "create_policy",
    "create_task",
    "default_config",
    "derive_stream",
    "emit_reports",
    "load_config",
    "run_experiment",
    "run_iteration",
    "run_sweep",
    "solve_p4",
    "validate_config",
]
