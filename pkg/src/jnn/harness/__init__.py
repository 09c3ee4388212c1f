"""Configuration, checkpoints, training/evaluation loops and the CLI."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .training import TrainingError, ablate, evaluate, train

__all__ = [
    "CheckpointError", "ConfigError", "RunConfig", "TrainingError", "ablate", "dump_config",
    "evaluate", "load_checkpoint", "load_config", "save_checkpoint", "train",
]
