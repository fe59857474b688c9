from .config import (ConfigError, ExperimentConfig, load_config, parse_config)
from .diag import BatterySummary, format_battery, run_theory_battery
from .report import build_report
from .runner import (HarnessError, canonical_pool_hash, cli_ablate, cli_run, cli_sweep,
                     load_runrecord)

__all__ = [
    "ConfigError", "ExperimentConfig", "load_config", "parse_config",
    "BatterySummary", "format_battery", "run_theory_battery",
    "build_report",
    "HarnessError", "canonical_pool_hash", "cli_ablate", "cli_run", "cli_sweep",
    "load_runrecord",
]
