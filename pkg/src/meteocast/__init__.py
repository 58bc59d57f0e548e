"""Joint 48-hour forecasting of temperature, irradiance and humidity with an
attention BiLSTM written in NumPy, plus CMA-ES tuning and Integrated Gradients."""

from .data import (
    FEATURE_NAMES,
    TARGET_NAMES,
    Scaler,
    SeriesTable,
    WindowSet,
    build_windows,
    clean_series,
    fetch_power_hourly,
    fit_scalers,
)
from .model import HParams, ForecastNet, build_model, forward, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
