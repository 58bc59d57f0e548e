"""CMA-ES with an ask/tell interface, and the hyperparameter search built on it.

The strategy follows the standard (mu/mu_w, lambda) formulation with
cumulative step-size adaptation and combined rank-one / rank-mu covariance
updates, using only positive recombination weights. Only the ranking of
fitness values is ever used.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import WindowSet, build_windows
from .exceptions import ConfigurationError, NumericError
from .numerics import make_rng

logger = logging.getLogger(__name__)


def default_population_size(n: int) -> int:
    return 4 + int(math.floor(3 * math.log(n)))


class CMAES:
    """Minimiser state. ``ask`` samples a generation, ``tell`` updates from its ranking."""

    def __init__(self, x0, sigma0: float, popsize: int | None = None, seed: int = 0):
        x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
        n = x0.size
        if n < 1:
            raise ConfigurationError("x0 must have at least one coordinate")
        if not sigma0 > 0:
            raise ConfigurationError(f"sigma0 must be positive, got {sigma0}")
        lam = default_population_size(n) if popsize is None else int(popsize)
        if lam < 2:
            raise ConfigurationError(f"population size must be >= 2, got {lam}")
        self.n = n
        self.lam = lam
        self.mu = lam // 2
        w = math.log((lam + 1) / 2.0) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / np.sum(self.weights**2)
        mueff = self.mueff
        self.cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        self.cs = (mueff + 2) / (n + mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + mueff)
        self.cmu = min(1 - self.c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

        self.mean = x0.copy()
        self.sigma = float(sigma0)
        self.C = np.eye(n)
        self.ps = np.zeros(n)
        self.pc = np.zeros(n)
        self.generation = 0
        self.evaluations = 0
        self.seed = seed
        self.rng = make_rng(seed)
        self.best_x: np.ndarray | None = None
        self.best_f = math.inf
        self._eigen()

    def _eigen(self):
        self.C = (self.C + self.C.T) / 2.0
        evals, B = np.linalg.eigh(self.C)
        if not np.all(np.isfinite(evals)) or evals.min() <= 0:
            raise NumericError(f"covariance matrix is not positive definite; eigenvalues {evals}")
        self.B = B
        self.D = np.sqrt(evals)
        self.invsqrtC = B @ np.diag(1.0 / self.D) @ B.T

    def ask(self) -> np.ndarray:
        """``lam`` candidates ``mean + sigma * N(0, C)``, shape ``[lam, n]``."""
        z = self.rng.standard_normal((self.lam, self.n))
        y = z @ (self.B * self.D).T
        return self.mean + self.sigma * y

    def tell(self, candidates, fitnesses) -> "CMAES":
        """Update from evaluated candidates; NaN/inf fitness ranks last, ties go by index."""
        X = np.asarray(candidates, dtype=np.float64)
        f = np.asarray(fitnesses, dtype=np.float64).reshape(-1)
        if X.shape != (self.lam, self.n) or f.size != self.lam:
            raise ConfigurationError(
                f"tell expects {self.lam} candidates of dimension {self.n}, got {X.shape} / {f.size}"
            )
        f = np.where(np.isfinite(f), f, np.inf)
        order = np.argsort(f, kind="stable")
        self.evaluations += self.lam
        if f[order[0]] < self.best_f:
            self.best_f = float(f[order[0]])
            self.best_x = X[order[0]].copy()
        n = self.n
        old = self.mean
        y = (X[order[: self.mu]] - old) / self.sigma
        yw = self.weights @ y
        self.mean = old + self.sigma * yw
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * (self.invsqrtC @ yw)
        norm_ps = float(np.linalg.norm(self.ps))
        hsig = norm_ps / math.sqrt(1 - (1 - self.cs) ** (2 * (self.generation + 1))) / self.chi_n < 1.4 + 2 / (n + 1)
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * yw
        rank_mu = (y.T * self.weights) @ y
        self.C = (
            (1 - self.c1 - self.cmu) * self.C
            + self.c1 * (np.outer(self.pc, self.pc) + (1 - hsig) * self.cc * (2 - self.cc) * self.C)
            + self.cmu * rank_mu
        )
        self.sigma *= math.exp((self.cs / self.damps) * (norm_ps / self.chi_n - 1))
        self.generation += 1
        self._eigen()
        return self

    def state_dict(self) -> dict:
        return {"mean": self.mean.copy(), "sigma": self.sigma, "C": self.C.copy(),
                "ps": self.ps.copy(), "pc": self.pc.copy(), "generation": self.generation}


def fmin(f: Callable[[np.ndarray], float], x0, sigma0: float, max_evals: int,
         ftarget: float = -math.inf, popsize: int | None = None, seed: int = 0) -> CMAES:
    """Run ask/tell until ``best_f < ftarget`` or the evaluation budget is spent."""
    es = CMAES(x0, sigma0, popsize, seed)
    while es.evaluations + es.lam <= max_evals and es.best_f >= ftarget:
        X = es.ask()
        es.tell(X, [f(x) for x in X])
    return es


# --------------------------------------------------------------------------
# hyperparameter search


@dataclass(frozen=True)
class Dimension:
    name: str
    lower: float
    upper: float
    scale: str = "linear"  # or "log"
    kind: str = "continuous"  # or "integer"

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ConfigurationError(f"{self.name}: lower {self.lower} must be < upper {self.upper}")
        if self.scale not in ("linear", "log") or self.kind not in ("continuous", "integer"):
            raise ConfigurationError(f"{self.name}: bad scale/kind {self.scale}/{self.kind}")
        if self.scale == "log" and self.lower <= 0:
            raise ConfigurationError(f"{self.name}: log scale needs a positive lower bound")

    def decode(self, u: float):
        """Map a unit-interval coordinate to the parameter value (rounded if integer)."""
        if self.scale == "log":
            v = math.exp(math.log(self.lower) + u * (math.log(self.upper) - math.log(self.lower)))
        else:
            v = self.lower + u * (self.upper - self.lower)
        if self.kind == "integer":
            return int(min(max(round(v), math.ceil(self.lower)), math.floor(self.upper)))
        return float(v)

    def encode(self, v: float) -> float:
        if self.scale == "log":
            return (math.log(v) - math.log(self.lower)) / (math.log(self.upper) - math.log(self.lower))
        return (v - self.lower) / (self.upper - self.lower)


def reflect_unit(u) -> np.ndarray:
    """Reflect coordinates into [0, 1] (period-2 mirror)."""
    u = np.mod(np.asarray(u, dtype=np.float64), 2.0)
    return np.where(u > 1.0, 2.0 - u, u)


@dataclass
class SearchSpace:
    dims: list[Dimension] = field(default_factory=lambda: [
        Dimension("n_past", 8, 168, "linear", "integer"),
        Dimension("learning_rate", 1e-4, 1e-1, "log"),
        Dimension("dropout_rate", 0.0, 0.5, "linear"),
        Dimension("n_bilstm_layers", 1, 4, "linear", "integer"),
        Dimension("units_per_direction", 4, 64, "log", "integer"),
    ])

    def __len__(self) -> int:
        return len(self.dims)

    def decode(self, x) -> dict:
        u = reflect_unit(x)
        return {d.name: d.decode(float(ui)) for d, ui in zip(self.dims, u)}

    def encode(self, values: dict) -> np.ndarray:
        return np.array([d.encode(values[d.name]) for d in self.dims])


def tuning_objective(pred_phys: np.ndarray, true_phys: np.ndarray, ranges) -> float:
    """Sum over features and forecast steps of MAE divided by the feature's range."""
    per_t = np.abs(pred_phys - true_phys).mean(axis=0)  # [n_future, 3]
    return float(np.sum(per_t / np.asarray(ranges, dtype=np.float64)))


class SeriesWindowProvider:
    """Builds (train, validation) windows for a given ``n_past`` from a training series."""

    def __init__(self, series, scalers, n_future: int = 48, validation_fraction: float = 0.1):
        self.series = series
        self.scalers = tuple(scalers)
        self.n_future = n_future
        self.validation_fraction = validation_fraction
        self._cache: dict[int, tuple[WindowSet, WindowSet]] = {}

    def __call__(self, n_past: int) -> tuple[WindowSet, WindowSet]:
        from .trainer import chronological_split

        if n_past not in self._cache:
            ws = build_windows(self.series, self.scalers, n_past, self.n_future)
            self._cache = {n_past: chronological_split(ws, self.validation_fraction)}
        return self._cache[n_past]


def tune_hyperparameters(space: SearchSpace, budget: int, provider: SeriesWindowProvider,
                         seed: int = 0, max_epochs: int = 15, sigma0: float = 0.3,
                         popsize: int | None = None, x0=None, base=None,
                         log_path=None, max_train_windows: int | None = None,
                         patience: int = 5):
    """CMA-ES search over ``space`` minimising the range-scaled validation MAE sum.

    Each candidate is trained for at most ``max_epochs`` epochs on the
    provider's training split and scored on its validation split in
    physical units. Returns ``(best HParams, log records)``; every record is
    also appended as one JSON line to ``log_path`` when given.
    """
    from .model import HParams, build_model, predict_future
    from .trainer import TrainConfig, to_physical, train

    base = base or HParams()
    es = CMAES(np.full(len(space), 0.5) if x0 is None else x0, sigma0, popsize, seed)
    if budget < es.lam:
        raise ConfigurationError(f"budget {budget} is smaller than the population size {es.lam}")
    ranges = [s.range for s in provider.scalers]
    log: list[dict] = []
    best_hp, best_j = None, math.inf
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while es.evaluations + es.lam <= budget:
            X = es.ask()
            fit = []
            for x in X:
                t0 = time.perf_counter()
                values = space.decode(x)
                record = {"eval": len(log), "generation": es.generation,
                          "candidate": [float(v) for v in x], "hparams": values}
                try:
                    hp = HParams(**{**asdict(base), **values})
                    tr, va = provider(hp.n_past)
                    if max_train_windows and len(tr) > max_train_windows:
                        tr = tr.subset(np.arange(len(tr) - max_train_windows, len(tr)))
                    net = build_model(hp, seed + len(log), provider.scalers)
                    net, _ = train(net, tr, TrainConfig(max_epochs=max_epochs, patience=patience,
                                                        validation_fraction=0.1, seed=seed))
                    pred = to_physical(predict_future(net, va.inputs), provider.scalers)
                    j = tuning_objective(pred, to_physical(va.targets, provider.scalers), ranges)
                    if not math.isfinite(j):
                        raise NumericError("objective is not finite")
                except Exception as exc:  # candidate failure ranks last
                    logger.warning("candidate %s failed: %s", values, exc)
                    record["error"] = str(exc)
                    j = math.inf
                record["objective"] = j if math.isfinite(j) else None
                record["wall_time"] = round(time.perf_counter() - t0, 3)
                log.append(record)
                if fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
                    fh.flush()
                if j < best_j:
                    best_j, best_hp = j, hp
                fit.append(j)
            es.tell(X, fit)
    finally:
        if fh:
            fh.close()
    return best_hp, log
