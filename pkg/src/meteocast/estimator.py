"""scikit-learn style wrappers around the window pipeline and the forecaster."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import N_FEATURES, N_TARGETS, SeriesTable, WindowSet, build_windows, fit_scalers, scalers_hash
from .exceptions import ShapeError
from .model import HParams, build_model, predict_future
from .trainer import TrainConfig, to_physical, train


class WindowTransformer(BaseEstimator, TransformerMixin):
    """Fits min-max scalers on a training series and turns series into windows."""

    def __init__(self, n_past=22, n_future=48):
        self.n_past = n_past
        self.n_future = n_future

    def fit(self, X: SeriesTable, y=None):
        self.scalers_ = fit_scalers(X)
        self.scaler_hash_ = scalers_hash(self.scalers_)
        return self

    def transform(self, X: SeriesTable) -> WindowSet:
        check_is_fitted(self, "scalers_")
        return build_windows(X, self.scalers_, self.n_past, self.n_future)

    def inverse_transform(self, scaled):
        check_is_fitted(self, "scalers_")
        return to_physical(np.asarray(scaled, dtype=np.float64), self.scalers_)


def _check_windows(X, n_past, n_future):
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 3 or X.shape[1:] != (n_past + n_future, N_FEATURES):
        raise ShapeError(f"expected X of shape [n, {n_past + n_future}, {N_FEATURES}], got {X.shape}")
    return X


class BiLSTMAttentionForecaster(BaseEstimator, RegressorMixin):
    """Attention BiLSTM regressor on scaled windows.

    ``X`` is ``[n, n_past + n_future, 7]`` and ``y`` ``[n, n_future, 3]``,
    both in scaled space. Rows are assumed to be in chronological order;
    the last ``validation_fraction`` of them drive early stopping.
    """

    def __init__(self, n_past=22, n_future=48, learning_rate=0.0031, dropout_rate=0.053,
                 n_bilstm_layers=2, units_per_direction=8, batch_size=64, max_epochs=100,
                 patience=10, validation_fraction=0.1, seed=0):
        self.n_past = n_past
        self.n_future = n_future
        self.learning_rate = learning_rate
        self.dropout_rate = dropout_rate
        self.n_bilstm_layers = n_bilstm_layers
        self.units_per_direction = units_per_direction
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _hparams(self) -> HParams:
        return HParams(self.n_past, self.n_future, self.learning_rate, self.dropout_rate,
                       self.n_bilstm_layers, self.units_per_direction, self.batch_size)

    def fit(self, X, y, scalers=None):
        h = self._hparams()
        X = _check_windows(X, h.n_past, h.n_future)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (len(X), h.n_future, N_TARGETS):
            raise ShapeError(f"expected y of shape [{len(X)}, {h.n_future}, {N_TARGETS}], got {y.shape}")
        ws = WindowSet(X, y, np.arange(len(X)).astype("datetime64[h]"), h.n_past, h.n_future)
        net = build_model(h, self.seed, scalers)
        cfg = TrainConfig(max_epochs=self.max_epochs, patience=self.patience,
                          validation_fraction=self.validation_fraction, seed=self.seed)
        self.net_, self.history_ = train(net, ws, cfg)
        self.n_features_in_ = N_FEATURES
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = _check_windows(X, self.n_past, self.n_future)
        return predict_future(self.net_, X)

    def score(self, X, y, sample_weight=None):
        """Negative MAE over all forecast steps and variables (higher is better)."""
        err = np.abs(self.predict(X) - np.asarray(y, dtype=np.float64))
        return -float(np.average(err.mean(axis=(1, 2)), weights=sample_weight))
