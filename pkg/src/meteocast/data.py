"""Hourly meteorological series: ingestion, cleaning, encodings, scaling, windows.

Model inputs use the channel order of :data:`FEATURE_NAMES`. In every window
the three meteorological channels of the ``n_future`` forecast steps are set
to zero; the four cyclical channels are kept for the whole window.

CSV series files have the header ``utc_timestamp,temp_c,irrad_wm2,relhum_pct``
with ISO-8601 UTC timestamps and empty cells for missing values. Location is
not stored in the CSV; callers supply it.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, FormatError, NetworkError, ParseError

logger = logging.getLogger(__name__)

TARGET_NAMES = ("temp", "irrad", "relhum")
FEATURE_NAMES = TARGET_NAMES + ("month_sin", "month_cos", "solh_sin", "solh_cos")
N_TARGETS = len(TARGET_NAMES)
N_FEATURES = len(FEATURE_NAMES)
UNITS = {"temp": "degC", "irrad": "W/m2", "relhum": "% points"}

CSV_COLUMNS = ("utc_timestamp", "temp_c", "irrad_wm2", "relhum_pct")
POWER_PARAMETERS = ("T2M", "ALLSKY_SFC_SW_DWN", "RH2M")
POWER_ENDPOINT = "https://power.larc.nasa.gov/api/temporal/hourly/point"
FILL_THRESHOLD = -900.0
WINDOW_CACHE_VERSION = 1

HOUR = np.timedelta64(1, "h")


# --------------------------------------------------------------------------
# series container


@dataclass
class SeriesTable:
    """Hourly records; ``values`` is ``[L, 3]`` with NaN marking missing cells."""

    latitude: float
    longitude: float
    timestamps: np.ndarray  # datetime64[h], UTC
    values: np.ndarray  # [L, 3] temp, irrad, relhum
    flagged: np.ndarray | None = None  # [L] bool, unrepaired gap rows

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, N_TARGETS)
        if len(self.timestamps) != len(self.values):
            raise ConfigurationError(
                f"{len(self.timestamps)} timestamps but {len(self.values)} value rows"
            )
        if self.flagged is None:
            self.flagged = np.zeros(len(self.timestamps), dtype=bool)
        if not -90.0 <= self.latitude <= 90.0 or not -180.0 <= self.longitude <= 180.0:
            raise ConfigurationError(
                f"invalid coordinates lat={self.latitude}, lon={self.longitude}"
            )

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def slice_dates(self, start, end) -> "SeriesTable":
        """Rows with ``start <= date <= end`` (inclusive calendar days)."""
        lo = np.datetime64(str(start), "h")
        hi = np.datetime64(str(end), "h") + np.timedelta64(24, "h")
        sel = (self.timestamps >= lo) & (self.timestamps < hi)
        return SeriesTable(self.latitude, self.longitude, self.timestamps[sel],
                           self.values[sel], self.flagged[sel])


def hourly_range(start_date, end_date) -> np.ndarray:
    """All UTC hours from ``start_date`` 00:00 through ``end_date`` 23:00."""
    lo = np.datetime64(str(start_date), "h")
    hi = np.datetime64(str(end_date), "h") + np.timedelta64(24, "h")
    if hi <= lo:
        return np.array([], dtype="datetime64[h]")
    return np.arange(lo, hi, HOUR)


def write_csv(series: SeriesTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for ts, row in zip(series.timestamps, series.values):
            stamp = str(ts.astype("datetime64[s]")) + "Z"
            w.writerow([stamp] + ["" if np.isnan(v) else repr(float(v)) for v in row])


def read_csv(path, latitude: float, longitude: float) -> SeriesTable:
    stamps, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise FormatError(f"{path}: header must be {','.join(CSV_COLUMNS)}, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
            try:
                stamps.append(np.datetime64(rec[0].rstrip("Z"), "h"))
                rows.append([float(v) if v.strip() else np.nan for v in rec[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return SeriesTable(latitude, longitude, np.array(stamps, dtype="datetime64[h]"),
                       np.array(rows, dtype=np.float64).reshape(-1, 3))


# --------------------------------------------------------------------------
# NASA POWER client


@dataclass
class GapReport:
    requested_hours: int
    missing_hours: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.missing_hours

    def summary(self) -> str:
        if self.complete:
            return f"{self.requested_hours} hours, no gaps"
        return f"{self.requested_hours} hours, {len(self.missing_hours)} incomplete"


def _power_url(endpoint: str, lat: float, lon: float, start: date, end: date) -> tuple[str, dict]:
    params = {
        "parameters": ",".join(POWER_PARAMETERS),
        "community": "RE",
        "longitude": f"{lon:.4f}",
        "latitude": f"{lat:.4f}",
        "start": start.strftime("%Y%m%d"),
        "end": end.strftime("%Y%m%d"),
        "format": "JSON",
        "time-standard": "UTC",
    }
    return endpoint, params


def parse_power_payload(raw: bytes) -> dict[str, dict[str, float]]:
    """Extract ``{parameter: {YYYYMMDDHH: value}}`` from a POWER JSON response."""
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ParseError("response is not UTF-8", exc.start) from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", exc.pos) from None
    try:
        block = doc["properties"]["parameter"]
    except (KeyError, TypeError):
        raise ParseError("payload lacks properties.parameter") from None
    out = {}
    for name in POWER_PARAMETERS:
        if name not in block or not isinstance(block[name], dict):
            raise ParseError(f"payload lacks parameter {name}")
        out[name] = block[name]
    return out


def _year_chunks(start: date, end: date) -> list[tuple[date, date]]:
    chunks = []
    cur = start
    while cur <= end:
        stop = min(date(cur.year, 12, 31), end)
        chunks.append((cur, stop))
        cur = stop + timedelta(days=1)
    return chunks


def _fetch_chunk(session, endpoint, lat, lon, start, end, cache_dir, timeout):
    url, params = _power_url(endpoint, lat, lon, start, end)
    key = hashlib.sha256(json.dumps([url, params], sort_keys=True).encode()).hexdigest()[:20]
    cached = Path(cache_dir) / f"power_{key}.json" if cache_dir else None
    if cached is not None and cached.exists():
        return cached.read_bytes()
    import requests

    try:
        resp = session.get(url, params=params, timeout=timeout)
        resp.raise_for_status()
    except requests.RequestException as exc:
        raise NetworkError(f"POWER request {start}..{end} failed: {exc}") from exc
    raw = resp.content
    parse_power_payload(raw)  # validate before caching
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        cached.write_bytes(raw)
    return raw


def fetch_power_hourly(latitude: float, longitude: float, start_date, end_date,
                       endpoint_url: str | None = None, cache_dir=None, session=None,
                       max_workers: int = 2, timeout: float = 120.0):
    """Download hourly T2M / ALLSKY_SFC_SW_DWN / RH2M for one point.

    Requests are split per calendar year and raw responses are cached in
    ``cache_dir``, so a repeated call with the same range makes no network
    requests. Returns ``(SeriesTable, GapReport)``; values at or below the
    provider fill value are missing.
    """
    start = date.fromisoformat(str(start_date))
    end = date.fromisoformat(str(end_date))
    if not -90 <= latitude <= 90 or not -180 <= longitude <= 180:
        raise ConfigurationError(f"invalid coordinates lat={latitude}, lon={longitude}")
    hours = hourly_range(start, end)
    values = np.full((len(hours), 3), np.nan)
    if len(hours) == 0:
        return SeriesTable(latitude, longitude, hours, values), GapReport(0)
    endpoint = endpoint_url or POWER_ENDPOINT
    if session is None:
        import requests

        session = requests.Session()
    chunks = _year_chunks(start, end)
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        raws = list(pool.map(
            lambda ch: _fetch_chunk(session, endpoint, latitude, longitude, ch[0], ch[1],
                                    cache_dir, timeout),
            chunks,
        ))
    index = {str(ts.astype(datetime).strftime("%Y%m%d%H")): i for i, ts in enumerate(hours)}
    for raw in raws:
        payload = parse_power_payload(raw)
        for col, name in enumerate(POWER_PARAMETERS):
            for stamp, v in payload[name].items():
                i = index.get(stamp)
                if i is None or v is None:
                    continue
                v = float(v)
                values[i, col] = np.nan if v <= FILL_THRESHOLD else v
    missing = [str(hours[i]) for i in np.flatnonzero(np.isnan(values).any(axis=1))]
    return SeriesTable(latitude, longitude, hours, values), GapReport(len(hours), missing)


# --------------------------------------------------------------------------
# cleaning


@dataclass
class CleanReport:
    interpolated: dict[str, int] = field(default_factory=dict)
    unrepaired_gaps: list[tuple[str, str, int]] = field(default_factory=list)
    inserted_rows: int = 0
    clamped: dict[str, int] = field(default_factory=dict)

    def summary(self) -> str:
        return (
            f"inserted {self.inserted_rows} rows; interpolated {self.interpolated}; "
            f"clamped {self.clamped}; {len(self.unrepaired_gaps)} unrepaired gaps"
        )


def clean_series(s: SeriesTable, max_gap_hours: int = 3) -> tuple[SeriesTable, CleanReport]:
    """Regularise to an exact hourly grid and repair short gaps.

    Gaps of at most ``max_gap_hours`` consecutive missing hours that have
    data on both sides are linearly interpolated per channel; longer gaps
    stay missing and their rows are flagged. Humidity is clamped to
    [0, 100] and irradiance floored at 0.
    """
    report = CleanReport()
    if len(s) == 0:
        return SeriesTable(s.latitude, s.longitude, s.timestamps, s.values), report
    order = np.argsort(s.timestamps, kind="stable")
    ts, vals = s.timestamps[order], s.values[order]
    keep = np.ones(len(ts), dtype=bool)
    keep[1:] = ts[1:] != ts[:-1]
    ts, vals = ts[keep], vals[keep]
    grid = np.arange(ts[0], ts[-1] + HOUR, HOUR)
    full = np.full((len(grid), 3), np.nan)
    full[((ts - ts[0]) // HOUR).astype(int)] = vals
    report.inserted_rows = len(grid) - len(ts)
    flagged = np.zeros(len(grid), dtype=bool)
    for col, name in enumerate(TARGET_NAMES):
        v = full[:, col]
        miss = np.isnan(v)
        n_fixed = 0
        i = 0
        n = len(v)
        while i < n:
            if not miss[i]:
                i += 1
                continue
            j = i
            while j < n and miss[j]:
                j += 1
            length = j - i
            if length <= max_gap_hours and i > 0 and j < n:
                frac = np.arange(1, length + 1) / (length + 1)
                v[i:j] = v[i - 1] + frac * (v[j] - v[i - 1])
                n_fixed += length
            else:
                flagged[i:j] = True
                report.unrepaired_gaps.append((str(grid[i]), name, length))
            i = j
        report.interpolated[name] = n_fixed
    with np.errstate(invalid="ignore"):
        lo_irr = full[:, 1] < 0
        rh_out = (full[:, 2] < 0) | (full[:, 2] > 100)
    full[lo_irr, 1] = 0.0
    full[:, 2] = np.where(rh_out, np.clip(full[:, 2], 0, 100), full[:, 2])
    report.clamped = {"irrad": int(lo_irr.sum()), "relhum": int(rh_out.sum())}
    return SeriesTable(s.latitude, s.longitude, grid, full, flagged), report


# --------------------------------------------------------------------------
# time features


def encode_cyclical(t, period):
    """``(sin(2*pi*t/period), cos(2*pi*t/period))``; works on scalars and arrays."""
    if np.any(np.asarray(period) <= 0):
        raise ConfigurationError(f"period must be positive, got {period}")
    angle = 2.0 * np.pi * np.asarray(t, dtype=np.float64) / period
    s, c = np.sin(angle), np.cos(angle)
    if np.ndim(s) == 0:
        return float(s), float(c)
    return s, c


def solar_hour(utc_timestamp, longitude: float):
    """Mean local solar time in hours, ``(UTC hour + longitude/15) mod 24``.

    No equation-of-time correction is applied.
    """
    if not -180.0 <= longitude <= 180.0:
        raise ConfigurationError(f"longitude {longitude} outside [-180, 180]")
    ts = np.asarray(utc_timestamp, dtype="datetime64[s]")
    secs = (ts - ts.astype("datetime64[D]")).astype(np.int64)
    value = np.mod(secs / 3600.0 + longitude / 15.0, 24.0)
    return float(value) if np.ndim(value) == 0 else value


def calendar_month(timestamps) -> np.ndarray:
    ts = np.asarray(timestamps, dtype="datetime64[M]")
    return (ts.astype(np.int64) % 12) + 1


def time_features(timestamps, longitude: float) -> np.ndarray:
    """``[L, 4]`` month_sin, month_cos, solh_sin, solh_cos."""
    ms, mc = encode_cyclical(calendar_month(timestamps), 12)
    ss, sc = encode_cyclical(solar_hour(timestamps, longitude), 24)
    return np.column_stack([ms, mc, ss, sc]).reshape(-1, 4)


# --------------------------------------------------------------------------
# min-max scaling


@dataclass(frozen=True)
class Scaler:
    feature: str
    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise ConfigurationError(
                f"degenerate scaler for {self.feature}: min={self.min}, max={self.max}"
            )

    @property
    def range(self) -> float:
        return self.max - self.min

    def apply(self, v):
        return (np.asarray(v, dtype=np.float64) - self.min) / (self.max - self.min)

    def invert(self, v):
        return np.asarray(v, dtype=np.float64) * (self.max - self.min) + self.min


def fit_minmax(values, feature: str = "") -> Scaler:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise ConfigurationError(f"no finite values to fit a scaler for {feature!r}")
    return Scaler(feature, float(v.min()), float(v.max()))


def apply_minmax(scaler: Scaler, v):
    out = scaler.apply(v)
    return float(out) if np.ndim(out) == 0 else out


def invert_minmax(scaler: Scaler, v):
    out = scaler.invert(v)
    return float(out) if np.ndim(out) == 0 else out


def fit_scalers(series: SeriesTable) -> tuple[Scaler, Scaler, Scaler]:
    """One scaler per meteorological channel; fit only on training data."""
    return tuple(fit_minmax(series.values[:, k], name) for k, name in enumerate(TARGET_NAMES))


def scalers_hash(scalers) -> str:
    doc = json.dumps([asdict(s) for s in scalers], sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# windows


@dataclass
class WindowSet:
    """Model-ready windows.

    ``origins[i]`` is the UTC timestamp of the first forecast step of
    window ``i``; its input covers ``origins[i] - n_past`` hours through
    ``origins[i] + n_future - 1``.
    """

    inputs: np.ndarray  # [count, n_past + n_future, 7]
    targets: np.ndarray  # [count, n_future, 3]
    origins: np.ndarray  # datetime64[h]
    n_past: int
    n_future: int
    scaler_hash: str = ""
    dropped: int = 0
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.inputs[idx], self.targets[idx], self.origins[idx],
                         self.n_past, self.n_future, self.scaler_hash, 0, self.config_hash)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.inputs, self.targets, self.origins.astype(np.int64)):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def contiguous_segments(valid: np.ndarray) -> list[tuple[int, int]]:
    """``[start, stop)`` runs of True in a boolean vector."""
    edges = np.diff(np.concatenate([[0], valid.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def build_windows(s: SeriesTable, scalers, n_past: int, n_future: int) -> WindowSet:
    """Stride-1 windows over every gap-free, exactly hourly segment of ``s``."""
    if n_past < 1 or n_future < 1:
        raise ConfigurationError(f"n_past and n_future must be >= 1, got {n_past}, {n_future}")
    W = n_past + n_future
    scalers = tuple(scalers)
    ts = s.timestamps
    feats = np.empty((len(s), N_FEATURES))
    for k, sc in enumerate(scalers):
        feats[:, k] = sc.apply(s.values[:, k])
    if len(s):
        feats[:, 3:] = time_features(ts, s.longitude)
    valid = ~np.isnan(s.values).any(axis=1)
    # a break in the hourly grid also ends a segment
    step_ok = np.ones(len(s), dtype=bool)
    if len(s) > 1:
        step_ok[1:] = (ts[1:] - ts[:-1]) == HOUR
    starts_list = []
    segments = []
    for a, b in contiguous_segments(valid):
        cuts = [a] + [i for i in range(a + 1, b) if not step_ok[i]] + [b]
        segments.extend(zip(cuts[:-1], cuts[1:]))
    for a, b in segments:
        L = b - a
        if L >= W:
            starts_list.append(np.arange(a, b - W + 1))
        else:
            logger.warning("segment of %d hours at %s is shorter than a window (%d)", L, ts[a], W)
    starts = np.concatenate(starts_list) if starts_list else np.zeros(0, dtype=int)
    dropped = max(0, len(s) - W + 1) - len(starts)
    idx = starts[:, None] + np.arange(W)[None, :]
    inputs = feats[idx] if len(starts) else np.zeros((0, W, N_FEATURES))
    targets = inputs[:, n_past:, :N_TARGETS].copy()
    inputs[:, n_past:, :N_TARGETS] = 0.0
    origins = ts[starts + n_past] if len(starts) else np.array([], dtype="datetime64[h]")
    cfg = {"n_past": n_past, "n_future": n_future, "scalers": scalers_hash(scalers),
           "longitude": s.longitude, "first": str(ts[0]) if len(ts) else "", "rows": len(s)}
    return WindowSet(
        np.ascontiguousarray(inputs), targets, origins, n_past, n_future,
        scalers_hash(scalers), int(dropped),
        hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16],
    )


def save_windows(ws: WindowSet, path) -> None:
    """Write a window cache (``.npz``; ``meta`` holds a JSON header)."""
    meta = {
        "format": "meteocast-windows", "version": WINDOW_CACHE_VERSION,
        "n_past": ws.n_past, "n_future": ws.n_future, "scaler_hash": ws.scaler_hash,
        "dropped": ws.dropped, "config_hash": ws.config_hash, "feature_order": list(FEATURE_NAMES),
    }
    arrays = {
        "inputs": ws.inputs, "targets": ws.targets,
        "origins": ws.origins.astype("datetime64[h]").astype(np.int64),
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    # fixed member timestamps keep the file byte-identical across runs
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arr), allow_pickle=False)
    os.replace(tmp, path)


def load_windows(path) -> WindowSet:
    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            arrays = {k: z[k] for k in ("inputs", "targets", "origins")}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: unreadable window cache ({exc})") from None
    if meta.get("version") != WINDOW_CACHE_VERSION:
        raise FormatError(f"{path}: field 'version' is {meta.get('version')}")
    return WindowSet(arrays["inputs"], arrays["targets"],
                     arrays["origins"].astype("datetime64[h]"), meta["n_past"], meta["n_future"],
                     meta["scaler_hash"], meta["dropped"], meta["config_hash"])


def dataset_stats(values) -> dict[str, dict[str, float]]:
    v = np.asarray(values, dtype=np.float64).reshape(-1, N_TARGETS)
    out = {}
    for k, name in enumerate(TARGET_NAMES):
        col = v[:, k][np.isfinite(v[:, k])]
        out[name] = {"min": float(col.min()), "max": float(col.max()),
                     "mean": float(col.mean()), "std": float(col.std())} if col.size else {}
    return out
