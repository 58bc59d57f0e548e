import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from meteocast.estimator import BiLSTMAttentionForecaster, WindowTransformer
from meteocast.exceptions import ShapeError
from meteocast.synthetic import SyntheticSpec, generate_synthetic


def _series():
    return generate_synthetic(SyntheticSpec(start="2021-03-01", end="2021-03-15"))


def test_window_transformer():
    s = _series()
    wt = WindowTransformer(n_past=6, n_future=3)
    with pytest.raises(NotFittedError):
        wt.transform(s)
    ws = wt.fit(s).transform(s)
    assert len(ws) == len(s) - 9 + 1 and ws.scaler_hash == wt.scaler_hash_
    np.testing.assert_allclose(wt.inverse_transform(ws.targets[0]), s.values[6:9], rtol=1e-12)
    assert wt.get_params() == {"n_past": 6, "n_future": 3}


def test_forecaster_fit_predict_score():
    s = _series()
    ws = WindowTransformer(6, 3).fit(s).transform(s)
    est = BiLSTMAttentionForecaster(n_past=6, n_future=3, units_per_direction=3, n_bilstm_layers=1,
                                    max_epochs=2, batch_size=32, seed=1)
    with pytest.raises(NotFittedError):
        est.predict(ws.inputs)
    est.fit(ws.inputs, ws.targets)
    pred = est.predict(ws.inputs)
    assert pred.shape == ws.targets.shape and len(est.history_) == 2
    assert est.score(ws.inputs, ws.targets) == pytest.approx(-np.abs(pred - ws.targets).mean())
    twin = clone(est).fit(ws.inputs, ws.targets)
    np.testing.assert_array_equal(twin.predict(ws.inputs), pred)
    with pytest.raises(ShapeError):
        est.predict(ws.inputs[:, :-1])
    with pytest.raises(ValueError):
        bad = ws.inputs.copy()
        bad[0, 0, 0] = np.nan
        est.predict(bad)
