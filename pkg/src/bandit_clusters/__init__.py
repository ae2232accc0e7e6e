"""Online clustering of bandits: policies, environments and an experiment harness."""

from .agents import POLICY_KINDS, make_policy
from .config import ConfigError, RunConfig, load_config
from .env import EnvModel, load_features, make_synthetic, write_features
from .harness import aggregate, recovery_rate, run_grid, run_one

__all__ = [
    "POLICY_KINDS",
    "ConfigError",
    "EnvModel",
    "RunConfig",
    "aggregate",
    "load_config",
    "load_features",
    "make_policy",
    "make_synthetic",
    "recovery_rate",
    "run_grid",
    "run_one",
    "write_features",
]
