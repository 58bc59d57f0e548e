import numpy as np
import pytest

from meteocast.data import SeriesTable, WindowSet, build_windows, fit_scalers, scalers_hash
from meteocast.exceptions import ConfigurationError, TrainingError
from meteocast.model import HParams, build_model, forward, predict_future
from meteocast.trainer import (
    AdamState,
    TrainConfig,
    _inference_loss,
    adam_step,
    chronological_split,
    evaluate,
    extract_lead_time_series,
    metrics_from_predictions,
    persistence_forecast,
    to_physical,
    train,
)

SMALL = HParams(n_past=6, n_future=3, units_per_direction=3, n_bilstm_layers=1,
                dropout_rate=0.0, batch_size=16, learning_rate=0.01)


def _series(n, seed=0, const=None):
    rng = np.random.default_rng(seed)
    ts = np.arange(np.datetime64("2021-01-01T00", "h"), np.datetime64("2021-01-01T00", "h") + n)
    hour = np.arange(n) % 24
    vals = np.column_stack([
        10 + 5 * np.sin(2 * np.pi * hour / 24) + rng.normal(0, 0.5, n),
        np.maximum(0, 400 * np.sin(2 * np.pi * (hour - 6) / 24)) + rng.normal(0, 5, n),
        60 - 10 * np.sin(2 * np.pi * hour / 24) + rng.normal(0, 1, n),
    ])
    if const is not None:
        vals[:] = const
    return SeriesTable(40.0, 0.0, ts, vals)


def _setup(n=400, seed=0):
    s = _series(n, seed)
    sc = fit_scalers(s)
    return s, sc, build_windows(s, sc, SMALL.n_past, SMALL.n_future)


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState.zeros_like(p)
    adam_step(p, {"w": np.zeros(2)}, st, 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": np.array([3.0, -0.5, 1e-3])}, AdamState.zeros_like(p), 0.01)
    np.testing.assert_allclose(p["w"], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_matches_hand_recurrence(rng):
    g_seq = rng.normal(size=(5, 4))
    p = {"w": np.zeros(4)}
    st = AdamState.zeros_like(p)
    m = v = np.zeros(4)
    ref = np.zeros(4)
    for t, g in enumerate(g_seq, start=1):
        adam_step(p, {"w": g}, st, 0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-13)


def test_adam_rejects_non_finite():
    p = {"layer.w": np.zeros(2)}
    with pytest.raises(TrainingError, match="layer.w"):
        adam_step(p, {"layer.w": np.array([np.nan, 0])}, AdamState.zeros_like(p), 0.1)


def test_zero_epochs_returns_initial_net():
    _, sc, ws = _setup()
    net = build_model(SMALL, 1, sc)
    before = net.checksum()
    out, hist = train(net, ws, TrainConfig(max_epochs=0))
    assert hist == [] and out.checksum() == before


def test_training_reduces_loss_and_restores_best():
    _, sc, ws = _setup()
    net = build_model(SMALL, 2, sc)
    _, va = chronological_split(ws, 0.1)
    start = _inference_loss(net, va)
    net, hist = train(net, ws, TrainConfig(max_epochs=5, patience=10))
    assert len(hist) == 5
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]
    vals = [h["val_loss"] for h in hist]
    best = min(vals)
    assert best < start
    assert net.metadata["best_epoch"] == vals.index(best) + 1
    assert _inference_loss(net, va) == pytest.approx(best, rel=1e-12)


def test_training_is_deterministic():
    _, sc, ws = _setup()
    a, ha = train(build_model(SMALL, 3, sc), ws, TrainConfig(max_epochs=2, seed=7))
    b, hb = train(build_model(SMALL, 3, sc), ws, TrainConfig(max_epochs=2, seed=7))
    assert a.checksum() == b.checksum() and ha == hb


def test_early_stopping_patience(monkeypatch):
    import meteocast.trainer as tr

    _, sc, ws = _setup()
    net = build_model(SMALL, 4, sc)
    before = net.checksum()
    monkeypatch.setattr(tr, "_inference_loss", lambda *a, **k: 1.0)  # never improves
    out, hist = train(net, ws, TrainConfig(max_epochs=50, patience=3))
    assert len(hist) == 3
    assert out.checksum() == before and out.metadata["best_epoch"] == 0


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(max_epochs=-1)
    with pytest.raises(ConfigurationError):
        TrainConfig(validation_fraction=0.0)


def _constant_predictor(sc, value_scaled):
    net = build_model(SMALL, 0, sc)
    net.head.weights[...] = 0.0
    net.head.bias[...] = value_scaled
    return net


def test_evaluate_perfect_predictor_is_zero():
    _, sc, _ = _setup()
    truth = np.array([12.0, 150.0, 55.0])
    test = build_windows(_series(100, const=truth), sc, SMALL.n_past, SMALL.n_future)
    net = _constant_predictor(sc, [s.apply(v) for s, v in zip(sc, truth)])
    rep = evaluate(net, test)
    np.testing.assert_allclose(rep.overall, 0.0, atol=1e-12)
    assert rep.per_timestep.shape == (SMALL.n_future, 3)


def test_evaluate_mean_predictor_is_mean_absolute_deviation():
    s, sc, ws = _setup(seed=5)
    mean_scaled = ws.targets.reshape(-1, 3).mean(axis=0)
    rep = evaluate(_constant_predictor(sc, mean_scaled), ws, clip=False)
    truth = to_physical(ws.targets, sc).reshape(-1, 3)
    np.testing.assert_allclose(rep.overall, np.abs(truth - truth.mean(axis=0)).mean(axis=0), rtol=1e-10)


def test_evaluate_matches_brute_force():
    _, sc, ws = _setup(seed=6)
    net = build_model(SMALL, 9, sc)
    rep = evaluate(net, ws, clip=False)
    pred = predict_future(net, ws.inputs)
    total = np.zeros(3)
    for i in range(len(ws)):
        for t in range(SMALL.n_future):
            for k in range(3):
                total[k] += abs(sc[k].invert(pred[i, t, k]) - sc[k].invert(ws.targets[i, t, k]))
    np.testing.assert_allclose(rep.overall, total / (len(ws) * SMALL.n_future), rtol=1e-9)
    d = rep.to_dict()
    assert d["schema"] == "meteocast-metrics/1" and len(d["per_timestep_mae"]) == SMALL.n_future


def test_evaluate_rejects_foreign_scalers():
    _, sc, ws = _setup()
    other = fit_scalers(_series(300, seed=8))
    assert scalers_hash(other) != ws.scaler_hash
    with pytest.raises(ConfigurationError):
        evaluate(build_model(SMALL, 0, other), ws)


def test_metrics_ratio_to_std():
    pred = np.zeros((4, 2, 3))
    true = np.ones((4, 2, 3)) * np.array([1.0, 2.0, 3.0])
    true[0] *= 3
    rep = metrics_from_predictions(pred, true)
    for k, name in enumerate(("temp", "irrad", "relhum")):
        assert rep.mae_over_std[name] == pytest.approx(rep.mae[name] / true[..., k].std())


def test_lead_time_series_indexing():
    _, sc, ws = _setup(150, seed=2)
    net = build_model(SMALL, 5, sc)
    out = extract_lead_time_series(net, ws, leads=(1, 3), scalers=sc)
    pred = to_physical(predict_future(net, ws.inputs), sc)
    for k in (1, 3):
        col = out[f"lead_{k}"]
        for i, hour in enumerate(out["hour"]):
            w = np.flatnonzero(ws.origins == hour - (k - 1))
            if w.size:
                np.testing.assert_allclose(col[i], np.maximum(pred[w[0], k - 1], [-np.inf, 0, 0]))
            else:
                assert np.isnan(col[i]).all()
    assert len(out["hour"]) == len(ws) + SMALL.n_future - 1
    with pytest.raises(ConfigurationError):
        extract_lead_time_series(net, ws, leads=(0,))


def test_persistence_brute_force():
    s = _series(200, seed=4)
    ws = build_windows(s, fit_scalers(s), 30, 30)
    p = persistence_forecast(s, ws, period=24)
    base = s.timestamps[0]
    for i in (0, 17, len(ws) - 1):
        o = int((ws.origins[i] - base) / np.timedelta64(1, "h"))
        for k in range(30):
            lag = 24 if k < 24 else 48
            np.testing.assert_array_equal(p[i, k], s.values[o + k - lag])
    with pytest.raises(ConfigurationError):
        persistence_forecast(s, build_windows(s, fit_scalers(s), 6, 30))
