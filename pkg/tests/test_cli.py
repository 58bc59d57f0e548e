import csv
import json
import threading
from datetime import datetime
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np
import pytest

from meteocast import cli
from meteocast.data import POWER_PARAMETERS, SeriesTable, hourly_range, write_csv
from meteocast.exceptions import ConfigurationError
from meteocast.model import load_checkpoint, save_checkpoint

FAST = ["--source", "fixture", "--train-start", "2021-01-01", "--train-end", "2021-03-17",
        "--test-start", "2021-03-18", "--test-end", "2021-03-31", "--max-epochs", "1",
        "--set", "model.units_per_direction=2", "--set", "model.n_bilstm_layers=1",
        "--set", "explain.samples=2", "--set", "explain.steps=8"]


def run(cmd, workdir, *extra):
    return cli.main([cmd, "--workdir", str(workdir), *FAST, *extra])


def table(path):
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    assert lines[0].startswith("# schema=meteocast-")
    return list(csv.reader(lines[1:]))


def tree_hashes(root):
    from meteocast.cli import _file_hash

    return {str(p.relative_to(root)): _file_hash(p) for p in sorted(root.rglob("*"))
            if p.is_file() and ".stamps" not in p.parts}


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    wd = tmp_path_factory.mktemp("fixture_run")
    assert run("pipeline", wd) == 0
    return wd


def test_pipeline_artifacts(pipeline_dir):
    forecast = table(pipeline_dir / "predict/forecast.csv")
    assert forecast[0] == ["utc_timestamp", "temp_c", "irrad_wm2", "relhum_pct"]
    assert len(forecast) == 1 + 48 and forecast[1][0] == "2021-04-01T00:00:00Z"
    mae = table(pipeline_dir / "report/forecast_error_by_lead.csv")
    assert len(mae) == 1 + 48 and all(len(r) == 4 for r in mae)
    att = table(pipeline_dir / "report/attention_profile.csv")
    assert att[0] == ["offset_hours", "mean", "std"]
    assert [int(r[0]) for r in att[1:]] == list(range(-21, 49))
    assert sum(float(r[1]) for r in att[1:]) == pytest.approx(1.0, abs=1e-6)
    imp = table(pipeline_dir / "report/feature_importance.csv")
    assert len(imp) == 1 + 7
    for name in ("temp", "irrad", "relhum"):
        assert len(table(pipeline_dir / f"report/ig_curves_{name}.csv")) == 1 + 70
        assert (pipeline_dir / f"report/ig_curves_{name}.svg").read_text().startswith("<svg")
    metrics = json.loads((pipeline_dir / "eval/metrics.json").read_text())
    ck = load_checkpoint(pipeline_dir / "model/model.ckpt")
    assert metrics["config_hash"] == ck.metadata["config_hash"] and metrics["seed"] == 0
    assert metrics["schema"] == "meteocast-metrics/1"


def test_pipeline_rerun_is_byte_identical(pipeline_dir, capsys):
    before = tree_hashes(pipeline_dir)
    assert run("pipeline", pipeline_dir) == 0
    assert "up to date" in capsys.readouterr().out
    assert tree_hashes(pipeline_dir) == before
    for sub in ("model", "eval", "explain", "report", ".stamps"):
        for p in sorted((pipeline_dir / sub).rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    assert run("pipeline", pipeline_dir) == 0
    assert tree_hashes(pipeline_dir) == before


def test_missing_prerequisites_name_the_command(tmp_path, capsys):
    for cmd, first in (("prepare", "fetch"), ("train", "prepare"), ("evaluate", "train"),
                       ("explain", "train"), ("predict", "train"), ("report", "evaluate")):
        assert run(cmd, tmp_path) == 2
        assert f"meteocast {first}" in capsys.readouterr().err


def test_invalid_input_exit_codes(tmp_path):
    assert run("fetch", tmp_path, "--lat", "123") == 2
    assert run("fetch", tmp_path, "--test-start", "2021-03-01") == 2  # overlaps training
    assert run("fetch", tmp_path, "--set", "model.nonsense=1") == 2
    assert run("fetch", tmp_path, "--set", "model.dropout_rate=1.5") == 2
    (tmp_path / "bad.yaml").write_text("seed: [1,\n")
    assert cli.main(["fetch", "-c", str(tmp_path / "bad.yaml")]) == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2


def test_config_precedence(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("seed: 5\nmodel: {units_per_direction: 4}\ndata: {endpoint: http://file}\n")
    cfg = cli.load_config(f, env={})
    assert cfg["seed"] == 5 and cfg["model"]["units_per_direction"] == 4
    assert cfg["model"]["n_past"] == 22  # default
    cfg = cli.load_config(f, ["model.units_per_direction=6"], {"seed": 9}, env={cli.ENDPOINT_ENV: "http://env"})
    assert cfg["seed"] == 9 and cfg["model"]["units_per_direction"] == 6
    assert cfg["data"]["endpoint"] == "http://env"
    cfg = cli.load_config(f, flags={"data.endpoint": "http://flag"}, env={cli.ENDPOINT_ENV: "http://env"})
    assert cfg["data"]["endpoint"] == "http://flag"
    a, b = cli.load_config(f, env={}), cli.load_config(f, flags={"workdir": "elsewhere"}, env={})
    assert cli.config_hash(a) == cli.config_hash(b)
    with pytest.raises(ConfigurationError):
        cli.load_config(f, ["seed"], env={})


class _Power(BaseHTTPRequestHandler):
    calls = 0
    mode = "ok"

    def do_GET(self):
        type(self).calls += 1
        q = {k: v[0] for k, v in parse_qs(urlparse(self.path).query).items()}
        if self.mode == "garbage":
            body = b'{"properties": {"parameter": '
        else:
            hours = hourly_range(datetime.strptime(q["start"], "%Y%m%d").date(),
                                 datetime.strptime(q["end"], "%Y%m%d").date())
            stamps = [h.astype(datetime).strftime("%Y%m%d%H") for h in hours]
            block = {p: {s: 20.0 + k for s in stamps} for k, p in enumerate(POWER_PARAMETERS)}
            block["T2M"][stamps[5]] = -999.0
            body = json.dumps({"properties": {"parameter": block}}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *a):
        pass


@pytest.fixture
def power_server():
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Power)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    _Power.calls, _Power.mode = 0, "ok"
    yield f"http://127.0.0.1:{srv.server_address[1]}/api/temporal/hourly/point"
    srv.shutdown()


def test_fetch_from_power_endpoint(tmp_path, power_server, monkeypatch, capsys):
    monkeypatch.setenv(cli.ENDPOINT_ENV, power_server)
    args = ["fetch", "--workdir", str(tmp_path), "--train-start", "2022-12-31", "--train-end", "2022-12-31",
            "--test-start", "2023-01-01", "--test-end", "2023-12-31"]
    assert cli.main(args) == 0
    assert _Power.calls == 2
    with open(tmp_path / "data/raw.csv") as fh:
        assert sum(1 for _ in fh) == 1 + 8760 + 24
    report = json.loads((tmp_path / "data/fetch_report.json").read_text())
    assert report["gap_report"]["missing_hours"] == ["2022-12-31T05", "2023-01-01T05"]
    assert report["clean_report"]["interpolated"]["temp"] == 2
    (tmp_path / ".stamps/fetch.json").unlink()
    assert cli.main(args) == 0
    assert _Power.calls == 2  # served from the response cache
    capsys.readouterr()


def test_fetch_failures_exit_1(tmp_path, power_server, capsys):
    _Power.mode = "garbage"
    base = ["fetch", "--workdir", str(tmp_path), "--train-start", "2022-01-01", "--train-end", "2022-01-01",
            "--test-start", "2022-01-02", "--test-end", "2022-01-02"]
    assert cli.main(base + ["--endpoint", power_server]) == 1
    assert "byte" in capsys.readouterr().err
    assert cli.main(base + ["--endpoint", "http://127.0.0.1:9/closed"]) == 1


def test_perfect_predictor_evaluates_to_zero(tmp_path):
    rng = np.random.default_rng(0)
    ts = hourly_range("2021-01-01", "2021-01-20")
    vals = np.column_stack([rng.normal(10, 3, len(ts)), rng.uniform(0, 500, len(ts)), rng.uniform(30, 90, len(ts))])
    const = np.array([11.5, 120.0, 55.0])
    vals[ts >= np.datetime64("2021-01-15T00")] = const
    write_csv(SeriesTable(0.0, 0.0, ts, vals), tmp_path / "series.csv")
    args = ["--workdir", str(tmp_path / "run"), "--source", "csv", "--csv", str(tmp_path / "series.csv"),
            "--lat", "0", "--lon", "0", "--train-start", "2021-01-01", "--train-end", "2021-01-14",
            "--test-start", "2021-01-15", "--test-end", "2021-01-20", "--max-epochs", "1",
            "--set", "model.units_per_direction=2", "--set", "model.n_bilstm_layers=1"]
    for cmd in ("fetch", "prepare", "train"):
        assert cli.main([cmd, *args]) == 0
    ck = tmp_path / "run/model/model.ckpt"
    net = load_checkpoint(ck)
    net.head.weights[...] = 0.0
    net.head.bias[...] = [s.apply(v) for s, v in zip(net.scalers, const)]
    save_checkpoint(net, ck)
    assert cli.main(["evaluate", *args]) == 0
    metrics = json.loads((tmp_path / "run/eval/metrics.json").read_text())
    assert all(abs(v) < 1e-9 for v in metrics["mae"].values())


def test_tune_then_use_tuned(tmp_path):
    extra = ["--budget", "4", "--set", "tune.popsize=4", "--set", "tune.max_epochs=1",
             "--set", "tune.max_train_windows=200"]
    assert run("fetch", tmp_path) == 0
    assert run("tune", tmp_path, *extra) == 0
    log = (tmp_path / "tune/search_log.jsonl").read_text().splitlines()
    assert len(log) == 4 and all("objective" in json.loads(x) for x in log)
    best = (tmp_path / "tune/search_log.jsonl").read_bytes()
    assert run("tune", tmp_path, *extra) == 0
    assert (tmp_path / "tune/search_log.jsonl").read_bytes() == best
    assert run("prepare", tmp_path, "--set", "model.use_tuned=true") == 0
    import yaml

    tuned = yaml.safe_load((tmp_path / "tune/best_hparams.yaml").read_text())["model"]
    meta = json.loads((tmp_path / "windows/scalers.json").read_text())
    assert meta["n_past"] == tuned["n_past"]
