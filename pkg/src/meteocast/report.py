"""Plot-data tables and small static SVG charts for the evaluation and explanation outputs.

The SVG writer is deliberately minimal: fixed canvas, fixed number
formatting and no timestamps, so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .data import FEATURE_NAMES, TARGET_NAMES, UNITS
from .exceptions import FormatError

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2")
W, PANEL_H = 640, 220
LEFT, RIGHT, TOP, BOTTOM = 64, 150, 28, 36


def _read(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(ln for ln in fh if not ln.startswith("#")))
    if len(rows) < 2:
        raise FormatError(f"{path}: table has no data rows")
    return rows[0], rows[1:]


def _col(rows, j) -> np.ndarray:
    return np.array([float(r[j]) if r[j] != "" else np.nan for r in rows])


def _num(v: float) -> str:
    return f"{v:.4g}"


def _nice_range(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5 * max(abs(lo), 1.0), hi + 0.5 * max(abs(hi), 1.0)
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Panel:
    def __init__(self, y0: float, xr, yr, title: str, xlabel: str, ylabel: str):
        self.y0 = y0
        self.xr, self.yr = xr, yr
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.parts: list[str] = []
        self.legend: list[tuple[str, str, bool]] = []

    def sx(self, x) -> float:
        return LEFT + (x - self.xr[0]) / (self.xr[1] - self.xr[0]) * (W - LEFT - RIGHT)

    def sy(self, y) -> float:
        return self.y0 + TOP + (1 - (y - self.yr[0]) / (self.yr[1] - self.yr[0])) * (PANEL_H - TOP - BOTTOM)

    def line(self, x, y, color, label=None, dashed=False, width=1.5):
        seg, pts = [], []
        for a, b in zip(x, y):
            if np.isfinite(b):
                pts.append(f"{self.sx(a):.2f},{self.sy(b):.2f}")
            elif pts:
                seg.append(pts)
                pts = []
        if pts:
            seg.append(pts)
        dash = ' stroke-dasharray="5,3"' if dashed else ""
        for pts in seg:
            self.parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{dash} '
                              f'points="{" ".join(pts)}"/>')
        if label:
            self.legend.append((label, color, False))

    def band(self, x, lo, hi, color):
        pts = [f"{self.sx(a):.2f},{self.sy(b):.2f}" for a, b in zip(x, hi)]
        pts += [f"{self.sx(a):.2f},{self.sy(b):.2f}" for a, b in zip(x[::-1], lo[::-1])]
        self.parts.append(f'<polygon fill="{color}" fill-opacity="0.2" stroke="none" points="{" ".join(pts)}"/>')

    def bars(self, labels, values, color):
        n = len(values)
        bw = (W - LEFT - RIGHT) / n
        for i, v in enumerate(values):
            x = LEFT + i * bw + 0.15 * bw
            y = self.sy(max(v, 0.0))
            self.parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{0.7 * bw:.2f}" '
                              f'height="{self.sy(0.0) - y:.2f}" fill="{color}"/>')
            self.parts.append(f'<text x="{x + 0.35 * bw:.2f}" y="{self.y0 + PANEL_H - BOTTOM + 14:.2f}" '
                              f'font-size="10" text-anchor="middle">{escape(labels[i])}</text>')

    def vline(self, x):
        self.parts.append(f'<line x1="{self.sx(x):.2f}" x2="{self.sx(x):.2f}" y1="{self.sy(self.yr[0]):.2f}" '
                          f'y2="{self.sy(self.yr[1]):.2f}" stroke="#444" stroke-dasharray="4,3"/>')

    def render(self, xticks=True) -> str:
        x0, x1 = LEFT, W - RIGHT
        yb, yt = self.sy(self.yr[0]), self.sy(self.yr[1])
        out = [f'<text x="{W / 2:.2f}" y="{self.y0 + 16:.2f}" font-size="13" text-anchor="middle">'
               f'{escape(self.title)}</text>',
               f'<rect x="{x0}" y="{yt:.2f}" width="{x1 - x0}" height="{yb - yt:.2f}" fill="none" stroke="#000"/>']
        for v in np.linspace(*self.yr, 5):
            out.append(f'<text x="{x0 - 4}" y="{self.sy(v) + 3:.2f}" font-size="10" text-anchor="end">{_num(v)}</text>')
        if xticks:
            for v in np.linspace(*self.xr, 6):
                out.append(f'<text x="{self.sx(v):.2f}" y="{yb + 13:.2f}" font-size="10" '
                           f'text-anchor="middle">{_num(v)}</text>')
        out.append(f'<text x="{(x0 + x1) / 2:.2f}" y="{yb + 28:.2f}" font-size="11" text-anchor="middle">'
                   f'{escape(self.xlabel)}</text>')
        out.append(f'<text x="14" y="{(yb + yt) / 2:.2f}" font-size="11" text-anchor="middle" '
                   f'transform="rotate(-90 14 {(yb + yt) / 2:.2f})">{escape(self.ylabel)}</text>')
        for i, (label, color, _) in enumerate(self.legend):
            y = yt + 12 + 14 * i
            out.append(f'<line x1="{x1 + 10}" x2="{x1 + 28}" y1="{y:.2f}" y2="{y:.2f}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{x1 + 32}" y="{y + 4:.2f}" font-size="10">{escape(label)}</text>')
        return "\n".join(self.parts + out)


def _svg(panels, path) -> Path:
    h = PANEL_H * len(panels)
    body = "\n".join(p.render(getattr(p, "xticks", True)) for p in panels)
    doc = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{h}" viewBox="0 0 {W} {h}" '
           f'font-family="sans-serif">\n<rect width="{W}" height="{h}" fill="#fff"/>\n{body}\n</svg>\n')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(doc, encoding="utf-8", newline="")
    return path


def render_report(inputs: dict, outdir, write_table) -> list[Path]:
    """Write plot-data CSVs and SVGs into ``outdir``.

    ``inputs`` maps ``per_timestep``, ``lead_series``, ``attention``,
    ``importance`` and ``curves`` to the CLI's evaluation/explanation tables.
    ``write_table(path, schema, header, rows)`` writes one CSV.
    """
    outdir = Path(outdir)
    written = []

    hdr, rows = _read(inputs["per_timestep"])
    lead = _col(rows, 0)
    mae = np.column_stack([_col(rows, 1 + k) for k in range(3)])
    written.append(write_table(outdir / "forecast_error_by_lead.csv", "meteocast-report-mae-by-lead/1",
                               ["lead_hour"] + [f"mae_{n}" for n in TARGET_NAMES],
                               [[int(a)] + list(b) for a, b in zip(lead, mae)]))
    panels = []
    for k, n in enumerate(TARGET_NAMES):
        p = _Panel(PANEL_H * k, (lead[0], lead[-1]), _nice_range(mae[:, k]),
                   f"MAE by forecast step: {n}", "lead (hours)", f"MAE [{UNITS[n]}]")
        p.line(lead, mae[:, k], PALETTE[k])
        panels.append(p)
    written.append(_svg(panels, outdir / "forecast_error_by_lead.svg"))

    hdr, rows = _read(inputs["lead_series"])
    n_show = min(len(rows), 7 * 24)
    rows = rows[:n_show]
    written.append(write_table(outdir / "lead_time_series.csv", "meteocast-report-lead-series/1", hdr, rows))
    leads = sorted({int(h.split("_")[0][4:]) for h in hdr if h.startswith("lead")})
    hours = np.arange(n_show)
    panels = []
    for k, n in enumerate(TARGET_NAMES):
        cols = [hdr.index(f"true_{n}")] + [hdr.index(f"lead{L}_{n}") for L in leads]
        data = [_col(rows, j) for j in cols]
        p = _Panel(PANEL_H * k, (0, max(n_show - 1, 1)), _nice_range(np.concatenate(data)),
                   f"{n}: truth and forecasts by lead", f"hours from {rows[0][0]}", UNITS[n])
        p.line(hours, data[0], "#000", "truth", width=1.2)
        for i, L in enumerate(leads):
            p.line(hours, data[1 + i], PALETTE[i], f"{L} h ahead", width=1.0)
        panels.append(p)
    written.append(_svg(panels, outdir / "lead_time_series.svg"))

    hdr, rows = _read(inputs["attention"])
    off, mean, std = _col(rows, 0), _col(rows, 1), _col(rows, 2)
    written.append(write_table(outdir / "attention_profile.csv", "meteocast-report-attention/1",
                               ["offset_hours", "mean", "std"], [[int(a), b, c] for a, b, c in zip(off, mean, std)]))
    p = _Panel(0, (off[0], off[-1]), _nice_range(np.concatenate([mean - std, mean + std])),
               "Mean attention weight per input step", "hours relative to present", "weight")
    p.band(off, mean - std, mean + std, PALETTE[0])
    p.line(off, mean, PALETTE[0], "mean")
    p.vline(0.5)
    written.append(_svg([p], outdir / "attention_profile.svg"))

    hdr, rows = _read(inputs["importance"])
    feats = [r[0] for r in rows]
    overall = _col(rows, hdr.index("overall"))
    per_t = {n: _col(rows, hdr.index(n)) for n in TARGET_NAMES}
    order = np.argsort(-overall, kind="stable")
    written.append(write_table(outdir / "feature_importance.csv", "meteocast-report-importance/1",
                               ["rank", "feature", "overall"] + list(TARGET_NAMES),
                               [[i + 1, feats[c], overall[c]] + [per_t[n][c] for n in TARGET_NAMES]
                                for i, c in enumerate(order)]))
    p = _Panel(0, (0, 1), (0.0, _nice_range(np.r_[0.0, overall])[1]),
               "Overall feature importance (mean |IG|)", "", "importance")
    p.xticks = False
    p.bars([feats[c] for c in order], overall[order], PALETTE[0])
    written.append(_svg([p], outdir / "feature_importance.svg"))

    hdr, rows = _read(inputs["curves"])
    for n in TARGET_NAMES:
        sel = [r for r in rows if r[0] == n]
        if not sel:
            continue
        off = _col(sel, 1)
        curves = np.column_stack([_col(sel, hdr.index(f"abs_{f}")) for f in FEATURE_NAMES])
        written.append(write_table(outdir / f"ig_curves_{n}.csv", "meteocast-report-ig-curves/1",
                                   ["offset_hours"] + list(FEATURE_NAMES),
                                   [[int(a)] + list(b) for a, b in zip(off, curves)]))
        p = _Panel(0, (off[0], off[-1]), (0.0, _nice_range(np.r_[0.0, curves.ravel()])[1]),
                   f"Input attributions for the {n} forecast", "hours relative to present", "mean |IG|")
        for c, f in enumerate(FEATURE_NAMES):
            p.line(off, curves[:, c], PALETTE[c], f, dashed=c >= 3)
        p.vline(0.5)
        written.append(_svg([p], outdir / f"ig_curves_{n}.svg"))
    return written
