"""Seeded synthetic hourly weather with a closed-form forecastability floor.

Each channel is a deterministic annual + diurnal pattern plus AR(1) noise::

    temp   = 18 - 8 * month_cos - 5 * solh_cos + e_T
    irrad  = 450 - 80 * month_cos - 300 * solh_cos + e_I
    relhum = 65 + 10 * month_cos + 8 * solh_cos - coupling * e_T + e_H

where ``month_cos`` / ``solh_cos`` are exactly the cyclical model inputs, so
the deterministic part is a known function of the features. With
``e_t = phi * e_{t-1} + sigma * N(0, 1)`` the best possible ``k``-step
forecast has error variance ``sigma^2 (1 - phi^(2k)) / (1 - phi^2)`` and,
errors being Gaussian, MAE ``sqrt(2/pi)`` times its square root.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SeriesTable, hourly_range, time_features
from .numerics import make_rng


@dataclass(frozen=True)
class AR1:
    phi: float
    sigma: float  # innovation standard deviation

    def stationary_std(self) -> float:
        return self.sigma / np.sqrt(1.0 - self.phi**2)

    def forecast_variance(self, k):
        k = np.asarray(k, dtype=np.float64)
        return self.sigma**2 * (1.0 - self.phi ** (2 * k)) / (1.0 - self.phi**2)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        eta = rng.normal(0.0, self.sigma, n)
        out = np.empty(n)
        prev = rng.normal(0.0, self.stationary_std())
        for t in range(n):
            prev = self.phi * prev + eta[t]
            out[t] = prev
        return out


@dataclass(frozen=True)
class SyntheticSpec:
    start: str = "2019-01-01"
    end: str = "2022-12-31"
    latitude: float = 37.98
    longitude: float = 23.73
    seed: int = 2019
    temp: AR1 = field(default_factory=lambda: AR1(0.9, 0.65))
    irrad: AR1 = field(default_factory=lambda: AR1(0.9, 17.0))
    relhum: AR1 = field(default_factory=lambda: AR1(0.9, 1.7))
    coupling: float = 2.0  # humidity points per degree of temperature anomaly


def deterministic_part(timestamps, longitude: float) -> np.ndarray:
    tf = time_features(timestamps, longitude)
    month_cos, solh_cos = tf[:, 1], tf[:, 3]
    return np.column_stack([
        18.0 - 8.0 * month_cos - 5.0 * solh_cos,
        450.0 - 80.0 * month_cos - 300.0 * solh_cos,
        65.0 + 10.0 * month_cos + 8.0 * solh_cos,
    ])


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> SeriesTable:
    ts = hourly_range(spec.start, spec.end)
    rng = make_rng(spec.seed)
    n = len(ts)
    e_t = spec.temp.sample(rng, n)
    e_i = spec.irrad.sample(rng, n)
    e_h = spec.relhum.sample(rng, n)
    values = deterministic_part(ts, spec.longitude)
    values[:, 0] += e_t
    values[:, 1] += e_i
    values[:, 2] += -spec.coupling * e_t + e_h
    return SeriesTable(spec.latitude, spec.longitude, ts, values)


def noise_floor_mae(spec: SyntheticSpec, n_future: int = 48) -> np.ndarray:
    """Best achievable MAE per lead ``[n_future, 3]`` given the full past."""
    k = np.arange(1, n_future + 1)
    var = np.column_stack([
        spec.temp.forecast_variance(k),
        spec.irrad.forecast_variance(k),
        spec.coupling**2 * spec.temp.forecast_variance(k) + spec.relhum.forecast_variance(k),
    ])
    return np.sqrt(2.0 / np.pi) * np.sqrt(var)
