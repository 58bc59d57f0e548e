"""Mini-batch Adam training with early stopping, and the evaluation suite."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import N_TARGETS, TARGET_NAMES, SeriesTable, WindowSet, dataset_stats, scalers_hash
from .exceptions import ConfigurationError, TrainingError
from .model import ForecastNet, forward, loss_and_grads, loss_mae, predict_future
from .numerics import make_rng

logger = logging.getLogger(__name__)

# physical plausibility bounds applied to reported predictions only
PHYSICAL_BOUNDS = {"temp": (-np.inf, np.inf), "irrad": (0.0, np.inf), "relhum": (0.0, 100.0)}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, **kw)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ConfigurationError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    max_epochs: int = 100
    patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0
    deterministic_reduction: bool = True
    max_seconds: float | None = None

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ConfigurationError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ConfigurationError(
                f"validation_fraction must lie in (0, 0.5), got {self.validation_fraction}"
            )


def chronological_split(windows: WindowSet, validation_fraction: float):
    """Split off the chronologically last windows for validation."""
    order = np.argsort(windows.origins, kind="stable")
    n_val = max(1, int(round(len(order) * validation_fraction)))
    if n_val >= len(order):
        raise ConfigurationError(f"{len(order)} windows are too few to hold out validation data")
    return windows.subset(order[:-n_val]), windows.subset(order[-n_val:])


def _inference_loss(net: ForecastNet, ws: WindowSet, chunk: int = 512) -> float:
    total = 0.0
    for i in range(0, len(ws), chunk):
        res = forward(net, ws.inputs[i : i + chunk])
        total += loss_mae(res, ws.targets[i : i + chunk]) * len(res.predictions)
    return total / len(ws)


def train(net: ForecastNet, windows: WindowSet, cfg: TrainConfig | None = None, callback=None):
    """Train ``net`` on ``windows``; returns ``(best net, history)``.

    The last ``validation_fraction`` of windows (by origin time) is held out.
    Training stops after ``patience`` epochs without a validation
    improvement, or at ``max_epochs`` / ``max_seconds``, and the
    parameters of the best validation epoch are returned.
    """
    cfg = cfg or TrainConfig()
    if len(windows) == 0:
        raise ConfigurationError("cannot train on an empty window set")
    h = net.hparams
    if windows.inputs.shape[1] != h.timesteps or windows.n_future != h.n_future:
        raise ConfigurationError(
            f"windows have {windows.inputs.shape[1]} steps, network expects {h.timesteps}"
        )
    history: list[dict] = []
    if cfg.max_epochs == 0:
        return net, history
    train_ws, val_ws = chronological_split(windows, cfg.validation_fraction)
    rng = make_rng(cfg.seed)
    params = net.parameter_dict()
    state = AdamState.zeros_like(params)
    best = {k: a.copy() for k, a in params.items()}
    best_loss = _inference_loss(net, val_ws)
    best_epoch = 0
    stale = 0
    started = time.monotonic()
    n = len(train_ws)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, h.batch_size):
            idx = np.sort(order[start : start + h.batch_size])
            loss, grads = loss_and_grads(net, train_ws.inputs[idx], train_ws.targets[idx],
                                         training=True, rng=rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            adam_step(params, grads, state, h.learning_rate)
            running += loss * len(idx)
        train_loss = running / n
        val_loss = _inference_loss(net, val_ws)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        logger.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if callback is not None:
            callback(history[-1])
        if val_loss < best_loss:
            best_loss, best_epoch, stale = val_loss, epoch, 0
            best = {k: a.copy() for k, a in params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        if cfg.max_seconds is not None and time.monotonic() - started > cfg.max_seconds:
            logger.info("time budget reached after epoch %d", epoch)
            break
    net.load_parameters(best)
    net.metadata = dict(net.metadata, best_epoch=best_epoch, best_val_loss=best_loss)
    return net, history


# --------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    mae: dict[str, float]
    per_timestep: np.ndarray  # [n_future, 3], physical units
    stats: dict[str, dict[str, float]]
    mae_over_std: dict[str, float]
    n_windows: int
    extra: dict = field(default_factory=dict)

    @property
    def overall(self) -> np.ndarray:
        return np.array([self.mae[n] for n in TARGET_NAMES])

    def to_dict(self) -> dict:
        return {
            "schema": "meteocast-metrics/1",
            "n_windows": self.n_windows,
            "mae": self.mae,
            "mae_over_std": self.mae_over_std,
            "stats": self.stats,
            "per_timestep_mae": self.per_timestep.tolist(),
            **self.extra,
        }


def clip_physical(values: np.ndarray) -> np.ndarray:
    out = np.array(values, dtype=np.float64, copy=True)
    for k, name in enumerate(TARGET_NAMES):
        lo, hi = PHYSICAL_BOUNDS[name]
        out[..., k] = np.clip(out[..., k], lo, hi)
    return out


def to_physical(scaled: np.ndarray, scalers) -> np.ndarray:
    out = np.empty_like(scaled, dtype=np.float64)
    for k, sc in enumerate(scalers):
        out[..., k] = sc.invert(scaled[..., k])
    return out


def unique_target_values(windows: WindowSet, targets_phys: np.ndarray) -> np.ndarray:
    """Physical target values of every distinct forecast hour covered by ``windows``."""
    nf = windows.n_future
    hours = (windows.origins[:, None] + np.arange(nf)[None, :]).astype(np.int64).reshape(-1)
    _, first = np.unique(hours, return_index=True)
    return targets_phys.reshape(-1, N_TARGETS)[first]


def metrics_from_predictions(pred_phys: np.ndarray, true_phys: np.ndarray,
                             stats_values: np.ndarray | None = None) -> MetricsReport:
    """Per-feature and per-timestep MAE of physical predictions ``[n, n_future, 3]``."""
    err = np.abs(pred_phys - true_phys)
    per_t = err.mean(axis=0)
    overall = per_t.mean(axis=0)
    stats = dataset_stats(true_phys if stats_values is None else stats_values)
    mae = {n: float(overall[k]) for k, n in enumerate(TARGET_NAMES)}
    ratio = {n: mae[n] / stats[n]["std"] if stats[n].get("std") else float("nan")
             for n in TARGET_NAMES}
    return MetricsReport(mae, per_t, stats, ratio, len(pred_phys))


def evaluate(net: ForecastNet, windows: WindowSet, scalers=None, clip: bool = True) -> MetricsReport:
    """MAE in physical units on ``windows`` (built with the training scalers)."""
    scalers = tuple(scalers) if scalers is not None else net.scalers
    if scalers is None:
        raise ConfigurationError("no scalers available: pass them or store them on the network")
    if windows.scaler_hash and windows.scaler_hash != scalers_hash(scalers):
        raise ConfigurationError(
            f"windows were scaled with {windows.scaler_hash}, model scalers are {scalers_hash(scalers)}"
        )
    if len(windows) == 0:
        raise ConfigurationError("cannot evaluate on an empty window set")
    pred = to_physical(predict_future(net, windows.inputs), scalers)
    if clip:
        pred = clip_physical(pred)
    truth = to_physical(windows.targets, scalers)
    return metrics_from_predictions(pred, truth, unique_target_values(windows, truth))


def extract_lead_time_series(net: ForecastNet, windows: WindowSet, leads=(1, 25, 48),
                             scalers=None) -> dict[str, np.ndarray]:
    """Predictions for each hour issued ``lead`` hours in advance, next to the truth.

    Returns columns ``hour`` (datetime64[h]), ``true`` ``[n, 3]`` and
    ``lead_<k>`` ``[n, 3]`` (NaN where no window issued such a forecast).
    """
    nf = windows.n_future
    leads = [int(k) for k in leads]
    for k in leads:
        if not 1 <= k <= nf:
            raise ConfigurationError(f"lead {k} outside [1, {nf}]")
    scalers = tuple(scalers) if scalers is not None else net.scalers
    pred = predict_future(net, windows.inputs)
    truth = windows.targets
    if scalers is not None:
        pred = clip_physical(to_physical(pred, scalers))
        truth = to_physical(truth, scalers)
    origins = windows.origins.astype(np.int64)
    hours_all = (origins[:, None] + np.arange(nf)).reshape(-1)
    uniq, first = np.unique(hours_all, return_index=True)
    out = {"hour": uniq.astype("datetime64[h]"), "true": truth.reshape(-1, N_TARGETS)[first]}
    pos = {h: i for i, h in enumerate(uniq.tolist())}
    for k in leads:
        col = np.full((len(uniq), N_TARGETS), np.nan)
        for w, o in enumerate(origins.tolist()):
            col[pos[o + k - 1]] = pred[w, k - 1]
        out[f"lead_{k}"] = col
    return out


def persistence_forecast(series: SeriesTable, windows: WindowSet, period: int = 24) -> np.ndarray:
    """Repeat the last ``period`` observed hours over the horizon, physical units.

    Step ``k`` (0-based) of a window starting at hour ``o`` is forecast as
    the observation at ``o + k - period * (k // period + 1)``.
    """
    base = series.timestamps[0].astype(np.int64)
    idx_origin = windows.origins.astype(np.int64) - base
    k = np.arange(windows.n_future)
    src = idx_origin[:, None] + k[None, :] - period * (k[None, :] // period + 1)
    if src.min() < 0:
        raise ConfigurationError("series does not reach far enough back for persistence")
    return series.values[src]
