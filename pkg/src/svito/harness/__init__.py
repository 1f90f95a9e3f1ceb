"""Experiment harness: configuration, studies and the command-line interface."""

from .config import ConfigError, StudyConfig, load_config
from .study import ResultTable, StudyAborted, run_oos_study, run_sim_study

__all__ = ["ConfigError", "ResultTable", "StudyAborted", "StudyConfig", "load_config", "run_oos_study", "run_sim_study"]
