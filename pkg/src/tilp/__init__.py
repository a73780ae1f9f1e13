"""Twin-guided resource planning for federated split learning over wireless links."""

from __future__ import annotations

from .core import (ConfigError, RngStream, SimConfig, SystemAction, desk_config, load_config,
                   project_action, table_config, validate_config)
from .harness import MetricsReport, PolicySpec, run_episode, run_suite

__all__ = [
    "ConfigError", "MetricsReport", "PolicySpec", "RngStream", "SimConfig", "SystemAction",
    "desk_config", "load_config", "project_action", "run_episode", "run_suite", "table_config",
    "validate_config",
]
__version__ = "0.1.0"
