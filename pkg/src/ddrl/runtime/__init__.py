"""Orchestration: configuration, wire protocol, simulated clock, transports and experiments."""
from .bench import bench_topologies, format_table
from .config import ExperimentConfig, load_config, load_config_matrix
from .experiment import Experiment, RunResult, evaluate_policy, run_experiment
from .sim import DelayHarness, Scheduler, inject_delay
from .wire import Tag, WireMessage, decode, encode

__all__ = [
    "bench_topologies", "format_table", "ExperimentConfig", "load_config", "load_config_matrix", "Experiment",
    "RunResult", "evaluate_policy", "run_experiment", "DelayHarness", "Scheduler", "inject_delay", "Tag",
    "WireMessage", "decode", "encode",
]
