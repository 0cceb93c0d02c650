"""Experiment sweeps: TOML configs, resumable cell execution, summaries and SVG plots."""
from .config import (ConfigError, ExperimentConfig, ModelConfig, OUTPUT_ROOT_ENV, load_config,
                     load_data_spec, parse_config)
from .plots import PLOT_KINDS, PlotError, make_plots
from .runner import CellOutcome, cell_fingerprint, run_cell, run_experiment
from .summary import load_reports, summarize, write_summary

__all__ = ["ConfigError", "ExperimentConfig", "ModelConfig", "OUTPUT_ROOT_ENV", "load_config",
           "load_data_spec", "parse_config", "PLOT_KINDS", "PlotError", "make_plots",
           "CellOutcome", "cell_fingerprint", "run_cell", "run_experiment", "load_reports",
           "summarize", "write_summary"]
