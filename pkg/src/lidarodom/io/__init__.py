"""Dataset formats, configuration, scenarios, synthetic data and the CLI."""

from .config import ConfigError, PipelineConfig, load_config, load_profile
from .dataset import Dataset, Event, load_dataset
from .formats import FormatError, read_clouds, read_trajectory, write_clouds, write_trajectory
from .scenario import ScenarioEvent, ScenarioScript, apply_scenario
from .synthetic import corridor_run, generate_synthetic

__all__ = [
    "ConfigError", "PipelineConfig", "load_config", "load_profile",
    "Dataset", "Event", "load_dataset",
    "FormatError", "read_clouds", "read_trajectory", "write_clouds", "write_trajectory",
    "ScenarioEvent", "ScenarioScript", "apply_scenario",
    "corridor_run", "generate_synthetic",
]
