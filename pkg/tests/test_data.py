import json
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meteocast.data import (
    POWER_PARAMETERS,
    SeriesTable,
    Scaler,
    apply_minmax,
    build_windows,
    clean_series,
    encode_cyclical,
    fetch_power_hourly,
    fit_minmax,
    fit_scalers,
    hourly_range,
    invert_minmax,
    load_windows,
    parse_power_payload,
    read_csv,
    save_windows,
    solar_hour,
    write_csv,
)
from meteocast.exceptions import ConfigurationError, FormatError, NetworkError, ParseError


def _series(n, seed=0, start="2023-01-01"):
    rng = np.random.default_rng(seed)
    ts = np.arange(np.datetime64(start, "h"), np.datetime64(start, "h") + n)
    vals = np.column_stack([rng.normal(15, 5, n), np.abs(rng.normal(200, 100, n)), rng.uniform(20, 90, n)])
    return SeriesTable(37.98, 23.73, ts, vals)


class FakeResponse:
    def __init__(self, content, status=200):
        self.content = content
        self.status = status

    def raise_for_status(self):
        if self.status >= 400:
            import requests

            raise requests.HTTPError(f"status {self.status}")


class FakeSession:
    """Answers POWER requests with a synthetic payload covering the requested days."""

    def __init__(self, fill_at=None):
        self.calls = 0
        self.fill_at = fill_at or set()

    def get(self, url, params=None, timeout=None):
        self.calls += 1
        hours = hourly_range(datetime.strptime(params["start"], "%Y%m%d").date(),
                             datetime.strptime(params["end"], "%Y%m%d").date())
        block = {}
        for k, name in enumerate(POWER_PARAMETERS):
            block[name] = {
                h.astype(datetime).strftime("%Y%m%d%H"): (-999.0 if (str(h), k) in self.fill_at else 10.0 + k)
                for h in hours
            }
        return FakeResponse(json.dumps({"properties": {"parameter": block}}).encode())


def test_fetch_row_counts_and_cache(tmp_path):
    sess = FakeSession()
    s, rep = fetch_power_hourly(37.98, 23.73, "2019-01-01", "2022-12-31", cache_dir=tmp_path, session=sess)
    assert len(s) == 35064 and rep.complete
    assert sess.calls == 4  # one request per year
    s23, _ = fetch_power_hourly(37.98, 23.73, "2023-01-01", "2023-12-31", cache_dir=tmp_path, session=sess)
    assert len(s23) == 8760
    before = sess.calls
    again, _ = fetch_power_hourly(37.98, 23.73, "2019-01-01", "2022-12-31", cache_dir=tmp_path, session=sess)
    assert sess.calls == before
    np.testing.assert_array_equal(again.values, s.values)


def test_fetch_fill_values_reported_missing(tmp_path):
    sess = FakeSession(fill_at={("2023-03-01T05", 1)})
    s, rep = fetch_power_hourly(0.0, 0.0, "2023-03-01", "2023-03-01", cache_dir=tmp_path, session=sess)
    assert len(s) == 24 and np.isnan(s.values[5, 1]) and not np.isnan(s.values[5, 0])
    assert rep.missing_hours == ["2023-03-01T05"]


def test_fetch_empty_range_and_bad_coordinates():
    s, rep = fetch_power_hourly(10, 10, "2023-01-02", "2023-01-01", session=FakeSession())
    assert len(s) == 0 and rep.requested_hours == 0
    with pytest.raises(ConfigurationError):
        fetch_power_hourly(95, 10, "2023-01-01", "2023-01-02", session=FakeSession())


def test_fetch_transport_failure(tmp_path):
    class Broken:
        def get(self, *a, **k):
            return FakeResponse(b"", status=503)

    with pytest.raises(NetworkError):
        fetch_power_hourly(1, 1, "2023-01-01", "2023-01-01", cache_dir=tmp_path, session=Broken())
    assert not list(tmp_path.iterdir())


def test_malformed_payload_offset():
    raw = b'{"properties": {"parameter": {"T2M": [1, 2,, 3]}}}'
    with pytest.raises(ParseError) as err:
        parse_power_payload(raw)
    assert err.value.offset == raw.index(b",,") + 1
    assert "byte" in str(err.value)
    with pytest.raises(ParseError):
        parse_power_payload(b'{"properties": {}}')


def test_csv_round_trip(tmp_path):
    s = _series(30)
    s.values[4, 2] = np.nan
    write_csv(s, tmp_path / "a.csv")
    back = read_csv(tmp_path / "a.csv", s.latitude, s.longitude)
    np.testing.assert_array_equal(back.timestamps, s.timestamps)
    np.testing.assert_array_equal(back.values, s.values)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "utc_timestamp,temp_c,irrad_wm2,relhum_pct"
    (tmp_path / "b.csv").write_text("time,t\n")
    with pytest.raises(FormatError):
        read_csv(tmp_path / "b.csv", 0, 0)


def test_clean_interpolates_midpoint():
    s = _series(3)
    s.values[:, 0] = [1.0, np.nan, 3.0]
    out, rep = clean_series(s, max_gap_hours=3)
    assert out.values[1, 0] == 2.0 and rep.interpolated["temp"] == 1


def test_clean_no_gaps_is_identity():
    s = _series(50)
    out, rep = clean_series(s)
    np.testing.assert_array_equal(out.values, s.values)
    np.testing.assert_array_equal(out.timestamps, s.timestamps)
    assert not out.flagged.any() and not rep.unrepaired_gaps


def test_clean_long_gap_is_flagged():
    s = _series(20)
    s.values[5:9, 1] = np.nan  # max_gap_hours + 1
    out, rep = clean_series(s, max_gap_hours=3)
    assert np.isnan(out.values[5:9, 1]).all() and out.flagged[5:9].all()
    assert rep.unrepaired_gaps == [(str(s.timestamps[5]), "irrad", 4)]


def test_clean_regrids_and_clamps():
    s = _series(10)
    keep = np.r_[0:4, 6:10]
    s2 = SeriesTable(s.latitude, s.longitude, s.timestamps[keep], s.values[keep])
    s2.values[0, 1] = -3.0
    s2.values[1, 2] = 101.0
    out, rep = clean_series(s2)
    assert len(out) == 10 and rep.inserted_rows == 2
    assert out.values[0, 1] == 0.0 and out.values[1, 2] == 100.0
    np.testing.assert_allclose(out.values[4:6, 0], s.values[3, 0] + (s.values[6, 0] - s.values[3, 0]) * np.array([1, 2]) / 3)


def test_encode_cyclical_examples():
    assert encode_cyclical(6, 12) == pytest.approx((0.0, -1.0), abs=1e-15)
    assert encode_cyclical(3, 12) == pytest.approx((1.0, 0.0), abs=1e-15)
    assert encode_cyclical(12, 12) == pytest.approx(encode_cyclical(0, 12), abs=1e-15)
    with pytest.raises(ConfigurationError):
        encode_cyclical(1, 0)


def test_solar_hour_examples():
    assert solar_hour(np.datetime64("2023-06-01T12:00"), 0.0) == 12.0
    assert solar_hour(np.datetime64("2023-06-01T12:00"), 15.0) == 13.0
    assert solar_hour(np.datetime64("2023-06-01T00:30"), -15.0) == 23.5


def test_scaler_examples():
    sc = fit_minmax([2.21, 30.0, 42.32], "temp")
    assert apply_minmax(sc, 2.21) == 0.0 and apply_minmax(sc, 42.32) == 1.0
    assert apply_minmax(sc, 18.78) == pytest.approx(0.4131, abs=1e-4)
    with pytest.raises(ConfigurationError):
        fit_minmax([1.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.floats(-1e4, 1e4))
def test_scaler_round_trip(lo, width, x):
    sc = Scaler("x", lo, lo + width)
    assert abs(invert_minmax(sc, apply_minmax(sc, x)) - x) <= 1e-12 * max(1.0, abs(x), abs(lo) + width)


def test_window_counts():
    s = _series(70)
    sc = fit_scalers(s)
    assert len(build_windows(s, sc, 22, 48)) == 1
    s = _series(8760)
    assert len(build_windows(s, fit_scalers(s), 22, 48)) == 8691


def test_window_counts_per_segment():
    s = _series(300)
    s.values[100, 0] = np.nan
    s.values[200:203, 2] = np.nan
    ws = build_windows(s, fit_scalers(s), 10, 5)
    seg = [100, 99, 97]
    assert len(ws) == sum(L - 15 + 1 for L in seg)
    assert ws.dropped == 286 - len(ws)
    assert len(build_windows(_series(10), fit_scalers(_series(10)), 10, 5)) == 0


def test_window_content():
    s = _series(200, seed=3)
    sc = fit_scalers(s)
    ws = build_windows(s, sc, 12, 6)
    assert np.all(ws.inputs[:, 12:, :3] == 0.0)
    assert np.all(np.abs(ws.inputs[:, :, 3:]) <= 1.0)
    np.testing.assert_allclose(ws.inputs[5, :12, 0], sc[0].apply(s.values[5:17, 0]), atol=0)
    np.testing.assert_allclose(ws.targets[5], np.column_stack([sc[k].apply(s.values[17:23, k]) for k in range(3)]))
    assert ws.origins[5] == s.timestamps[17]
    ang = np.arctan2(ws.inputs[:, :, 5], ws.inputs[:, :, 6])
    step = np.mod(np.diff(ang, axis=1), 2 * np.pi)
    np.testing.assert_allclose(step, 2 * np.pi / 24, atol=1e-12)


def test_window_checksum_deterministic_and_cache(tmp_path):
    s = _series(150)
    sc = fit_scalers(s)
    a, b = build_windows(s, sc, 8, 4), build_windows(s, sc, 8, 4)
    assert a.checksum() == b.checksum() and a.config_hash == b.config_hash
    save_windows(a, tmp_path / "w.npz")
    first = (tmp_path / "w.npz").read_bytes()
    save_windows(a, tmp_path / "w.npz")
    assert (tmp_path / "w.npz").read_bytes() == first
    back = load_windows(tmp_path / "w.npz")
    assert back.checksum() == a.checksum() and back.config_hash == a.config_hash
    (tmp_path / "bad.npz").write_bytes(b"junk")
    with pytest.raises(FormatError):
        load_windows(tmp_path / "bad.npz")


def test_test_data_outside_training_range_is_allowed():
    train, test = _series(100, seed=1), _series(100, seed=2)
    test.values[:, 0] += 40.0
    ws = build_windows(test, fit_scalers(train), 5, 5)
    assert ws.inputs[:, :5, 0].max() > 1.0
