"""Command-line pipeline: fetch, prepare, train, tune, evaluate, explain, predict, report.

Every command reads one YAML config (``--config``), applies flag overrides
and writes its artifacts below ``workdir``. Precedence is
flags > ``METEOCAST_POWER_URL`` (endpoint only) > config file > defaults.

Exit codes: 0 success, 1 runtime failure, 2 invalid input, config or
missing prerequisite.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import date
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (
    CSV_COLUMNS,
    FEATURE_NAMES,
    TARGET_NAMES,
    UNITS,
    Scaler,
    SeriesTable,
    build_windows,
    clean_series,
    fetch_power_hourly,
    fit_scalers,
    load_windows,
    read_csv,
    save_windows,
    scalers_hash,
    time_features,
    write_csv,
)
from .exceptions import ConfigurationError, FormatError, MeteocastError, ShapeError
from .model import HParams, build_model, load_checkpoint, predict_future, save_checkpoint

logger = logging.getLogger("meteocast")

ENDPOINT_ENV = "METEOCAST_POWER_URL"
SOURCES = ("power", "csv", "synthetic", "fixture")
FIXTURE_FILE = "synthetic_fixture.csv"

DEFAULTS = {
    "workdir": "runs/default",
    "seed": 0,
    "location": {"latitude": 37.98, "longitude": 23.73},
    "train": {"start": "2019-01-01", "end": "2022-12-31"},
    "test": {"start": "2023-01-01", "end": "2023-12-31"},
    "data": {"source": "power", "csv": None, "cache_dir": None, "endpoint": None,
             "max_gap_hours": 3, "synthetic_seed": 2019},
    "model": asdict(HParams()) | {"use_tuned": False},
    "training": {"max_epochs": 100, "patience": 10, "validation_fraction": 0.1, "max_seconds": None},
    "tune": {"budget": 60, "max_epochs": 15, "popsize": None, "sigma0": 0.3, "max_train_windows": None},
    "explain": {"samples": 64, "steps": 64},
    "predict": {"at": None},
}
# fields that locate files but do not change results
_UNHASHED = (("workdir",), ("data", "cache_dir"))
# config sections each command's output depends on (upstream files cover the rest)
_RELEVANT = {
    "fetch": ("location", "train", "test", "data"),
    "prepare": ("location", "train", "test", "model"),
    "train": ("model", "training", "seed"),
    "tune": ("location", "train", "model", "training", "tune", "seed"),
    "evaluate": ("location",),
    "explain": ("explain",),
}


class MissingPrerequisite(ConfigurationError):
    def __init__(self, path, command):
        super().__init__(f"{path} not found; run `meteocast {command}` first")


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigurationError(f"config key {where + key!r} must be a mapping")
            out[key] = _merge(base[key], val, where + key + ".")
        else:
            out[key] = str(val) if isinstance(val, date) else val
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigurationError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    node[keys[-1]] = str(value) if isinstance(value, date) else value


def _parse_date(value, name) -> date:
    try:
        return date.fromisoformat(str(value))
    except ValueError:
        raise ConfigurationError(f"{name}: {value!r} is not an ISO date") from None


def validate_config(cfg: dict) -> dict:
    loc = cfg["location"]
    try:
        lat, lon = float(loc["latitude"]), float(loc["longitude"])
    except (TypeError, ValueError):
        raise ConfigurationError("location.latitude and location.longitude must be numbers") from None
    if not -90 <= lat <= 90 or not -180 <= lon <= 180:
        raise ConfigurationError(f"invalid coordinates lat={lat}, lon={lon}")
    tr = [_parse_date(cfg["train"][k], f"train.{k}") for k in ("start", "end")]
    te = [_parse_date(cfg["test"][k], f"test.{k}") for k in ("start", "end")]
    if tr[0] > tr[1] or te[0] > te[1]:
        raise ConfigurationError("date ranges must have start <= end")
    if not (tr[1] < te[0] or te[1] < tr[0]):
        raise ConfigurationError(f"train {tr[0]}..{tr[1]} and test {te[0]}..{te[1]} overlap")
    if cfg["data"]["source"] not in SOURCES:
        raise ConfigurationError(f"data.source must be one of {SOURCES}, got {cfg['data']['source']!r}")
    if cfg["data"]["source"] == "csv":
        p = cfg["data"]["csv"]
        if not p or not Path(p).is_file():
            raise ConfigurationError(f"data.csv {p!r} is not a readable file")
    model_hp(cfg)
    return cfg


def load_config(path=None, sets=(), flags=None, env=None) -> dict:
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"config {path} must be a mapping")
        cfg = _merge(cfg, doc)
    if env.get(ENDPOINT_ENV):
        cfg["data"]["endpoint"] = env[ENDPOINT_ENV]
    for item in sets:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    for key, value in (flags or {}).items():
        if value is not None:
            _set_path(cfg, key, value)
    return validate_config(cfg)


def config_hash(cfg: dict) -> str:
    c = copy.deepcopy(cfg)
    for keys in _UNHASHED:
        node = c
        for k in keys[:-1]:
            node = node[k]
        node.pop(keys[-1], None)
    return hashlib.sha256(json.dumps(c, sort_keys=True, default=str).encode()).hexdigest()[:16]


def model_hp(cfg: dict) -> HParams:
    fields = {k: v for k, v in cfg["model"].items() if k != "use_tuned"}
    try:
        return HParams(**fields)
    except TypeError as exc:
        raise ConfigurationError(f"model section: {exc}") from None


# --------------------------------------------------------------------------
# artifact plumbing


class Workspace:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = Path(cfg["workdir"])
        self.hash = config_hash(cfg)
        self.seed = int(cfg["seed"])

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def need(self, rel: str, command: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingPrerequisite(p, command)
        return p

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "meteocast_version": __version__}

    # content-hash short-circuit: skip a command whose inputs and outputs are unchanged
    def _stamp(self, command: str) -> Path:
        return self.path(".stamps", f"{command}.json")

    def input_key(self, command: str, inputs) -> str:
        sections = {k: self.cfg[k] for k in _RELEVANT[command]}
        if "data" in sections:
            sections["data"] = {k: v for k, v in sections["data"].items() if k != "cache_dir"}
        h = hashlib.sha256(f"{command}:{json.dumps(sections, sort_keys=True, default=str)}".encode())
        for p in inputs:
            h.update(_file_hash(p).encode())
        return h.hexdigest()

    def up_to_date(self, command: str, key: str) -> bool:
        st = self._stamp(command)
        if not st.exists():
            return False
        doc = json.loads(st.read_text())
        if doc.get("key") != key:
            return False
        return all(self.path(rel).exists() and _file_hash(self.path(rel)) == h
                   for rel, h in doc["outputs"].items())

    def mark(self, command: str, key: str, outputs) -> None:
        doc = {"key": key, "outputs": {str(Path(p).relative_to(self.root)): _file_hash(p) for p in outputs}}
        _write_text(self._stamp(command), json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="")
    tmp.replace(path)
    return path


def _write_json(path, doc) -> Path:
    return _write_text(path, json.dumps(doc, sort_keys=True, indent=2, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return str(v)


def write_table(path, schema: str, ws: Workspace, header, rows) -> Path:
    """CSV with one ``#`` provenance line, a header row and the data rows."""
    buf = io.StringIO()
    buf.write(f"# schema={schema} config_hash={ws.hash} seed={ws.seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return _write_text(path, buf.getvalue())


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise FormatError(f"{path}: empty table")
    return rows[0], rows[1:]


def _load_scalers(path) -> tuple[Scaler, ...]:
    doc = json.loads(Path(path).read_text())
    return tuple(Scaler(**s) for s in doc["scalers"])


def _location(cfg):
    return float(cfg["location"]["latitude"]), float(cfg["location"]["longitude"])


def _series(ws: Workspace) -> SeriesTable:
    lat, lon = _location(ws.cfg)
    return read_csv(ws.need("data/clean.csv", "fetch"), lat, lon)


# --------------------------------------------------------------------------
# commands


def cmd_fetch(ws: Workspace) -> int:
    cfg, d = ws.cfg, ws.cfg["data"]
    lat, lon = _location(cfg)
    start = min(cfg["train"]["start"], cfg["test"]["start"])
    end = max(cfg["train"]["end"], cfg["test"]["end"])
    raw_p, clean_p, rep_p = ws.path("data/raw.csv"), ws.path("data/clean.csv"), ws.path("data/fetch_report.json")
    inputs = [d["csv"]] if d["source"] == "csv" else []
    key = ws.input_key("fetch", inputs)
    if ws.up_to_date("fetch", key):
        print(f"fetch: up to date ({clean_p})")
        return 0
    gaps = None
    if d["source"] == "power":
        cache = d["cache_dir"] or ws.path("cache")
        raw, gap = fetch_power_hourly(lat, lon, start, end, d["endpoint"], cache_dir=cache)
        gaps = {"requested_hours": gap.requested_hours, "missing_hours": gap.missing_hours}
        print(f"fetch: {gap.summary()}")
    elif d["source"] == "synthetic":
        from .synthetic import SyntheticSpec, generate_synthetic

        raw = generate_synthetic(SyntheticSpec(start=start, end=end, latitude=lat, longitude=lon,
                                               seed=int(d["synthetic_seed"])))
    else:
        if d["source"] == "fixture":
            src = resources.files("meteocast").joinpath("fixtures", FIXTURE_FILE)
            with resources.as_file(src) as p:
                raw = read_csv(p, lat, lon)
        else:
            raw = read_csv(d["csv"], lat, lon)
        raw = raw.slice_dates(start, end)
    if len(raw) == 0:
        raise ConfigurationError(f"source {d['source']!r} has no rows between {start} and {end}")
    clean, report = clean_series(raw, int(d["max_gap_hours"]))
    write_csv(raw, raw_p)
    write_csv(clean, clean_p)
    _write_json(rep_p, {
        "schema": "meteocast-fetch/1", **ws.provenance(), "source": d["source"],
        "rows": len(raw), "first": str(raw.timestamps[0]), "last": str(raw.timestamps[-1]),
        "gap_report": gaps, "clean_report": asdict(report),
    })
    print(f"fetch: {len(raw)} rows -> {raw_p}; clean: {report.summary()}")
    ws.mark("fetch", key, [raw_p, clean_p, rep_p])
    return 0


def _hparams_for(ws: Workspace) -> HParams:
    hp = model_hp(ws.cfg)
    if ws.cfg["model"].get("use_tuned"):
        best = ws.need("tune/best_hparams.yaml", "tune")
        hp = HParams(**{**asdict(hp), **yaml.safe_load(best.read_text())["model"]})
    return hp


def cmd_prepare(ws: Workspace) -> int:
    src = ws.need("data/clean.csv", "fetch")
    key = ws.input_key("prepare", [src] + ([ws.path("tune/best_hparams.yaml")]
                                           if ws.cfg["model"].get("use_tuned") else []))
    outs = [ws.path("windows/train.npz"), ws.path("windows/test.npz"), ws.path("windows/scalers.json")]
    if ws.up_to_date("prepare", key):
        print("prepare: up to date")
        return 0
    hp = _hparams_for(ws)
    s = _series(ws)
    train_s = s.slice_dates(ws.cfg["train"]["start"], ws.cfg["train"]["end"])
    test_s = s.slice_dates(ws.cfg["test"]["start"], ws.cfg["test"]["end"])
    if len(train_s) == 0:
        raise ConfigurationError("no rows fall inside the training range")
    scalers = fit_scalers(train_s)  # training data only
    tr = build_windows(train_s, scalers, hp.n_past, hp.n_future)
    te = build_windows(test_s, scalers, hp.n_past, hp.n_future)
    if len(tr) == 0:
        raise ConfigurationError(f"training range yields no {hp.timesteps}-hour windows")
    tr.config_hash = te.config_hash = ws.hash
    save_windows(tr, outs[0])
    save_windows(te, outs[1])
    _write_json(outs[2], {"schema": "meteocast-scalers/1", **ws.provenance(),
                          "scalers": [asdict(x) for x in scalers], "scaler_hash": scalers_hash(scalers),
                          "n_past": hp.n_past, "n_future": hp.n_future,
                          "train_windows": len(tr), "test_windows": len(te),
                          "train_dropped": tr.dropped, "test_dropped": te.dropped})
    print(f"prepare: {len(tr)} train / {len(te)} test windows (n_past={hp.n_past}, n_future={hp.n_future})")
    ws.mark("prepare", key, outs)
    return 0


def cmd_train(ws: Workspace) -> int:
    from .trainer import TrainConfig, train

    wpath = ws.need("windows/train.npz", "prepare")
    spath = ws.need("windows/scalers.json", "prepare")
    key = ws.input_key("train", [wpath, spath])
    outs = [ws.path("model/model.ckpt"), ws.path("model/history.json")]
    if ws.up_to_date("train", key):
        print(f"train: up to date ({outs[0]})")
        return 0
    hp = _hparams_for(ws)
    windows = load_windows(wpath)
    if (windows.n_past, windows.n_future) != (hp.n_past, hp.n_future):
        raise ConfigurationError(
            f"windows are {windows.n_past}+{windows.n_future} hours but the model wants "
            f"{hp.n_past}+{hp.n_future}; rerun `meteocast prepare`"
        )
    t = ws.cfg["training"]
    cfg = TrainConfig(max_epochs=int(t["max_epochs"]), patience=int(t["patience"]),
                      validation_fraction=float(t["validation_fraction"]), seed=ws.seed,
                      max_seconds=t["max_seconds"])
    net = build_model(hp, ws.seed, _load_scalers(spath))
    net, history = train(net, windows, cfg,
                         callback=lambda r: print(f"epoch {r['epoch']}: train {r['train_loss']:.5f} "
                                                  f"val {r['val_loss']:.5f}", flush=True))
    net.metadata = dict(net.metadata, config_hash=ws.hash, seed=ws.seed)
    outs[0].parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, outs[0])
    _write_json(outs[1], {"schema": "meteocast-history/1", **ws.provenance(), "epochs": history,
                          "best_epoch": net.metadata.get("best_epoch"),
                          "n_parameters": net.n_parameters()})
    print(f"train: best epoch {net.metadata.get('best_epoch')} -> {outs[0]}")
    ws.mark("train", key, outs)
    return 0


def cmd_tune(ws: Workspace) -> int:
    from .cmaes import SearchSpace, SeriesWindowProvider, tune_hyperparameters

    src = ws.need("data/clean.csv", "fetch")
    key = ws.input_key("tune", [src])
    outs = [ws.path("tune/search_log.jsonl"), ws.path("tune/best_hparams.yaml")]
    if ws.up_to_date("tune", key):
        print("tune: up to date")
        return 0
    t = ws.cfg["tune"]
    s = _series(ws).slice_dates(ws.cfg["train"]["start"], ws.cfg["train"]["end"])
    base = model_hp(ws.cfg)
    provider = SeriesWindowProvider(s, fit_scalers(s), base.n_future,
                                    float(ws.cfg["training"]["validation_fraction"]))
    outs[0].parent.mkdir(parents=True, exist_ok=True)
    outs[0].unlink(missing_ok=True)
    best, log = tune_hyperparameters(
        SearchSpace(), int(t["budget"]), provider, seed=ws.seed, max_epochs=int(t["max_epochs"]),
        sigma0=float(t["sigma0"]), popsize=t["popsize"], base=base, log_path=outs[0],
        max_train_windows=t["max_train_windows"],
    )
    if best is None:
        raise MeteocastError("every tuning candidate failed; see tune/search_log.jsonl")
    doc = {"schema": "meteocast-tuned/1", **ws.provenance(),
           "objective": min(r["objective"] for r in log if r["objective"] is not None),
           "evaluations": len(log), "model": asdict(best)}
    _write_text(outs[1], yaml.safe_dump(doc, sort_keys=True))
    print(f"tune: {len(log)} evaluations, best {asdict(best)}")
    ws.mark("tune", key, outs)
    return 0


def cmd_evaluate(ws: Workspace) -> int:
    from .trainer import (evaluate, extract_lead_time_series, metrics_from_predictions,
                          persistence_forecast, to_physical)

    ck = ws.need("model/model.ckpt", "train")
    te = ws.need("windows/test.npz", "prepare")
    clean = ws.path("data/clean.csv")
    key = ws.input_key("evaluate", [ck, te] + ([clean] if clean.exists() else []))
    outs = [ws.path("eval/metrics.json"), ws.path("eval/per_timestep_mae.csv"),
            ws.path("eval/lead_time_series.csv")]
    if ws.up_to_date("evaluate", key):
        print("evaluate: up to date")
        return 0
    net = load_checkpoint(ck)
    windows = load_windows(te)
    if len(windows) == 0:
        raise ConfigurationError("the test range yields no windows")
    rep = evaluate(net, windows)
    extra = {}
    try:
        s = _series(ws)

        pers = persistence_forecast(s, windows, 24)
        if np.isfinite(pers).all():
            pm = metrics_from_predictions(pers, to_physical(windows.targets, net.scalers))
            extra["persistence_24h_mae"] = pm.mae
            extra["improvement_over_persistence"] = {
                n: 1.0 - rep.mae[n] / pm.mae[n] for n in TARGET_NAMES if pm.mae[n] > 0
            }
    except ConfigurationError as exc:
        logger.info("persistence baseline skipped: %s", exc)
    _write_json(outs[0], {**rep.to_dict(), **ws.provenance(), **extra,
                          "units": UNITS, "checkpoint_sha256": _file_hash(ck)})
    nf = windows.n_future
    write_table(outs[1], "meteocast-per-timestep-mae/1", ws, ["lead_hour"] + list(TARGET_NAMES),
                [[k + 1] + list(rep.per_timestep[k]) for k in range(nf)])
    leads = sorted({1, min(25, nf), nf})
    series = extract_lead_time_series(net, windows, leads)
    header = ["utc_timestamp"] + [f"true_{n}" for n in TARGET_NAMES] + [
        f"lead{k}_{n}" for k in leads for n in TARGET_NAMES]
    rows = []
    for i, hour in enumerate(series["hour"]):
        row = [str(hour.astype("datetime64[s]")) + "Z"] + list(series["true"][i])
        for k in leads:
            row += list(series[f"lead_{k}"][i])
        rows.append(row)
    write_table(outs[2], "meteocast-lead-series/1", ws, header, rows)
    print("evaluate: " + ", ".join(f"{n} MAE {rep.mae[n]:.4f} {UNITS[n]}" for n in TARGET_NAMES))
    ws.mark("evaluate", key, outs)
    return 0


def _sample_indices(n: int, k: int) -> np.ndarray:
    return np.unique(np.linspace(0, n - 1, num=min(k, n)).round().astype(int))


def cmd_explain(ws: Workspace) -> int:
    from .explain import aggregate_attributions, extract_attention_profile, integrated_gradients

    ck = ws.need("model/model.ckpt", "train")
    te = ws.need("windows/test.npz", "prepare")
    key = ws.input_key("explain", [ck, te])
    outs = [ws.path("explain/attention_profile.csv"), ws.path("explain/importance.csv"),
            ws.path("explain/ig_curves.csv"), ws.path("explain/explain.json")]
    if ws.up_to_date("explain", key):
        print("explain: up to date")
        return 0
    net = load_checkpoint(ck)
    windows = load_windows(te)
    if len(windows) == 0:
        raise ConfigurationError("the test range yields no windows")
    prof = extract_attention_profile(net, windows)
    write_table(outs[0], "meteocast-attention/1", ws, ["offset_hours", "mean", "std"],
                zip(prof.offsets.tolist(), prof.mean, prof.std))
    steps = int(ws.cfg["explain"]["steps"])
    idx = _sample_indices(len(windows), int(ws.cfg["explain"]["samples"]))
    atts, worst = [], 0.0
    for i in idx:
        got = integrated_gradients(net, windows.inputs[i], steps=steps)
        worst = max([worst] + [a.completeness_residual / max(abs(a.delta), 1e-12) for a in got])
        atts.extend(got)
    summ = aggregate_attributions(atts)
    write_table(outs[1], "meteocast-importance/1", ws, ["feature"] + list(TARGET_NAMES) + ["overall"],
                [[f] + [summ.importance[t][c] for t in TARGET_NAMES] + [summ.overall[c]]
                 for c, f in enumerate(FEATURE_NAMES)])
    rows = []
    for t in TARGET_NAMES:
        for j, off in enumerate(prof.offsets.tolist()):
            rows.append([t, off] + list(summ.curves[t][j]) + list(summ.signed_curves[t][j]))
    write_table(outs[2], "meteocast-ig-curves/1", ws,
                ["target", "offset_hours"] + [f"abs_{f}" for f in FEATURE_NAMES]
                + [f"signed_{f}" for f in FEATURE_NAMES], rows)
    _write_json(outs[3], {"schema": "meteocast-explain/1", **ws.provenance(), "samples": len(idx),
                          "steps": steps, "baseline": "zeros", "target": "mean over forecast steps",
                          "max_relative_completeness_residual": worst, "ranking": summ.ranking(),
                          "attention_peak_offset": int(prof.offsets[int(np.argmax(prof.mean))])})
    print(f"explain: {len(idx)} samples; overall ranking {summ.ranking()[:3]}")
    ws.mark("explain", key, outs)
    return 0


def cmd_predict(ws: Workspace) -> int:
    ck = ws.need("model/model.ckpt", "train")
    src = ws.need("data/clean.csv", "fetch")
    net = load_checkpoint(ck)
    h = net.hparams
    s = _series(ws)
    at = ws.cfg["predict"]["at"]
    # forecast starts one hour after the last observation (or at ``predict.at``)
    first = np.datetime64(str(at), "h") if at else s.timestamps[-1] + np.timedelta64(1, "h")
    past = first - np.arange(h.n_past, 0, -1).astype("timedelta64[h]")
    pos = np.searchsorted(s.timestamps, past)
    if (pos >= len(s)).any() or (s.timestamps[np.minimum(pos, len(s) - 1)] != past).any():
        raise ConfigurationError(f"the {h.n_past} hours before {first} are not all in {src}")
    vals = s.values[pos]
    if np.isnan(vals).any():
        raise ConfigurationError(f"the {h.n_past} hours before {first} contain missing values")
    future = first + np.arange(h.n_future).astype("timedelta64[h]")
    x = np.zeros((h.timesteps, len(FEATURE_NAMES)))
    x[: h.n_past, :3] = np.column_stack([sc.apply(vals[:, k]) for k, sc in enumerate(net.scalers)])
    x[:, 3:] = time_features(np.concatenate([past, future]), s.longitude)
    from .trainer import clip_physical, to_physical

    pred = clip_physical(to_physical(predict_future(net, x[None])[0], net.scalers))
    out = ws.path("predict/forecast.csv")
    write_table(out, "meteocast-forecast/1", ws, list(CSV_COLUMNS),
                [[str(t.astype("datetime64[s]")) + "Z"] + list(p) for t, p in zip(future, pred)])
    print(f"predict: {len(pred)} hours from {first} -> {out}")
    return 0


def cmd_report(ws: Workspace) -> int:
    from .report import render_report

    need = {
        "per_timestep": ws.need("eval/per_timestep_mae.csv", "evaluate"),
        "lead_series": ws.need("eval/lead_time_series.csv", "evaluate"),
        "attention": ws.need("explain/attention_profile.csv", "explain"),
        "importance": ws.need("explain/importance.csv", "explain"),
        "curves": ws.need("explain/ig_curves.csv", "explain"),
    }
    written = render_report(need, ws.path("report"),
                            lambda path, schema, header, rows: write_table(path, schema, ws, header, rows))
    print(f"report: {len(written)} files -> {ws.path('report')}")
    return 0


def cmd_pipeline(ws: Workspace) -> int:
    for step in (cmd_fetch, cmd_prepare, cmd_train, cmd_evaluate, cmd_explain, cmd_predict, cmd_report):
        step(ws)
    return 0


COMMANDS = {
    "fetch": (cmd_fetch, "download or generate the hourly series and clean it"),
    "prepare": (cmd_prepare, "fit scalers on the training range and build windows"),
    "train": (cmd_train, "train the forecaster and write a checkpoint"),
    "tune": (cmd_tune, "CMA-ES hyperparameter search"),
    "evaluate": (cmd_evaluate, "test-set MAE, per-lead errors and lead-time series"),
    "explain": (cmd_explain, "attention profile and Integrated Gradients importances"),
    "predict": (cmd_predict, "forecast the hours after the latest observations"),
    "report": (cmd_report, "plot-data CSVs and SVG figures"),
    "pipeline": (cmd_pipeline, "fetch through report in one go (tune excluded)"),
}

# flag -> config key
_FLAGS = {
    "workdir": "workdir", "seed": "seed", "lat": "location.latitude", "lon": "location.longitude",
    "train_start": "train.start", "train_end": "train.end", "test_start": "test.start",
    "test_end": "test.end", "source": "data.source", "csv": "data.csv", "endpoint": "data.endpoint",
    "cache_dir": "data.cache_dir", "max_epochs": "training.max_epochs", "budget": "tune.budget",
    "at": "predict.at",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set model.units_per_direction=16")
    common.add_argument("--workdir")
    common.add_argument("--seed", type=int)
    common.add_argument("--lat", type=float)
    common.add_argument("--lon", type=float)
    for name in ("train-start", "train-end", "test-start", "test-end"):
        common.add_argument(f"--{name}")
    common.add_argument("--source", choices=SOURCES)
    common.add_argument("--csv", help="series CSV for --source csv")
    common.add_argument("--endpoint", help=f"POWER endpoint URL (also ${ENDPOINT_ENV})")
    common.add_argument("--cache-dir")
    common.add_argument("--max-epochs", type=int)
    common.add_argument("--budget", type=int, help="tuning evaluation budget")
    common.add_argument("--at", help="first forecast hour for predict (ISO timestamp)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="meteocast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"meteocast {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        flags = {key: getattr(args, attr) for attr, key in _FLAGS.items()}
        cfg = load_config(args.config, args.set, flags)
        return COMMANDS[args.command][0](Workspace(cfg))
    except (ConfigurationError, ShapeError, FormatError) as exc:
        print(f"meteocast {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MeteocastError, OSError, ArithmeticError) as exc:
        print(f"meteocast {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
