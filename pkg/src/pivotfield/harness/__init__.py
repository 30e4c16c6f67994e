"""Experiment harness: configuration, forcing construction, twin experiments,
cross-validation and the command-line interface."""

from .weather import WeatherRecord, crop_coefficient, gdd, load_weather_csv
from .config import ExperimentConfig, load_config
from .validate import nrmse, rmse, rmse_series
from .twin import run_twin_experiment

__all__ = [
    "WeatherRecord",
    "crop_coefficient",
    "gdd",
    "load_weather_csv",
    "ExperimentConfig",
    "load_config",
    "rmse",
    "rmse_series",
    "nrmse",
    "run_twin_experiment",
]
