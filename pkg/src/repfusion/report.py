"""Byte-stable JSON, CSV and SVG emission.

Numbers in SVG output are rounded to fixed precision and every collection is
written in a fixed order, so identical inputs always give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf"]


def _plain(obj):
    """Recursively convert numpy values into JSON-native types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not math.isfinite(v):
            return None
        return v
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc
    return path


def write_json(path, obj) -> Path:
    return atomic_write(path, dumps(obj))


def write_csv(path, header: list[str], rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return atomic_write(path, buf.getvalue())


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# --------------------------------------------------------------------------
# SVG
# --------------------------------------------------------------------------

def _f(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    span = hi - lo
    raw = span / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * span:
        out.append(round(v, 12))
        v += step
    return out


def _label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.2e}"
    return f"{v:.6g}"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


class _Canvas:
    W, H = 640, 400
    L, R, T, B = 70, 160, 40, 50

    def __init__(self, title, xlabel, ylabel):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.W}" height="{self.H}" '
            f'viewBox="0 0 {self.W} {self.H}" font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{self.W}" height="{self.H}" fill="white"/>',
            f'<text x="{self.W / 2:.0f}" y="20" text-anchor="middle" font-size="14">{_escape(title)}</text>',
            f'<text x="{(self.L + self.W - self.R) / 2:.0f}" y="{self.H - 10}" text-anchor="middle">{_escape(xlabel)}</text>',
            f'<text x="15" y="{(self.T + self.H - self.B) / 2:.0f}" text-anchor="middle" '
            f'transform="rotate(-90 15 {(self.T + self.H - self.B) / 2:.0f})">{_escape(ylabel)}</text>',
        ]
        self.pw = self.W - self.L - self.R
        self.ph = self.H - self.T - self.B

    def set_range(self, xlo, xhi, ylo, yhi):
        if xhi == xlo:
            xlo, xhi = xlo - 0.5, xhi + 0.5
        if yhi == ylo:
            ylo, yhi = ylo - 0.5, yhi + 0.5
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo, yhi

    def sx(self, x):
        return self.L + (x - self.xlo) / (self.xhi - self.xlo) * self.pw

    def sy(self, y):
        return self.T + self.ph - (y - self.ylo) / (self.yhi - self.ylo) * self.ph

    def axes(self, xticks=True):
        x0, y0 = self.L, self.T + self.ph
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + self.pw}" y2="{y0}" stroke="black"/>')
        self.parts.append(f'<line x1="{x0}" y1="{self.T}" x2="{x0}" y2="{y0}" stroke="black"/>')
        for v in _ticks(self.ylo, self.yhi):
            y = _f(self.sy(v))
            self.parts.append(f'<line x1="{x0 - 4}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/>')
            self.parts.append(f'<text x="{x0 - 6}" y="{y}" text-anchor="end" dominant-baseline="middle">{_label(v)}</text>')
        if xticks:
            for v in _ticks(self.xlo, self.xhi):
                x = _f(self.sx(v))
                self.parts.append(f'<line x1="{x}" y1="{y0}" x2="{x}" y2="{y0 + 4}" stroke="black"/>')
                self.parts.append(f'<text x="{x}" y="{y0 + 16}" text-anchor="middle">{_label(v)}</text>')

    def legend(self, names):
        for i, name in enumerate(names):
            y = self.T + 10 + 16 * i
            x = self.W - self.R + 10
            c = PALETTE[i % len(PALETTE)]
            self.parts.append(f'<line x1="{x}" y1="{y}" x2="{x + 20}" y2="{y}" stroke="{c}" stroke-width="2"/>')
            self.parts.append(f'<text x="{x + 25}" y="{y}" dominant-baseline="middle">{_escape(name)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_chart_svg(series: dict, title: str = "", xlabel: str = "x", ylabel: str = "y",
                   bands: dict | None = None) -> str:
    """``series`` maps name -> (xs, ys); ``bands`` optionally name -> (xs, lo, hi)."""
    c = _Canvas(title, xlabel, ylabel)
    xs_all, ys_all = [], []
    for xs, ys in series.values():
        for x, y in zip(xs, ys):
            if y is not None and math.isfinite(float(y)):
                xs_all.append(float(x))
                ys_all.append(float(y))
    for xs, lo, hi in (bands or {}).values():
        ys_all += [float(v) for v in lo] + [float(v) for v in hi]
    if not xs_all:
        c.set_range(0.0, 1.0, 0.0, 1.0)
        c.axes()
        return c.render()
    ylo, yhi = min(ys_all), max(ys_all)
    pad = 0.05 * (yhi - ylo) if yhi > ylo else 0.5
    c.set_range(min(xs_all), max(xs_all), ylo - pad, yhi + pad)
    c.axes()
    names = list(series.keys())
    for i, name in enumerate(names):
        colour = PALETTE[i % len(PALETTE)]
        if bands and name in bands:
            bx, lo, hi = bands[name]
            pts = [f"{_f(c.sx(float(x)))},{_f(c.sy(float(v)))}" for x, v in zip(bx, hi)]
            pts += [f"{_f(c.sx(float(x)))},{_f(c.sy(float(v)))}" for x, v in reversed(list(zip(bx, lo)))]
            c.parts.append(f'<polygon points="{" ".join(pts)}" fill="{colour}" fill-opacity="0.2" stroke="none"/>')
        xs, ys = series[name]
        pts = [f"{_f(c.sx(float(x)))},{_f(c.sy(float(y)))}" for x, y in zip(xs, ys)
               if y is not None and math.isfinite(float(y))]
        if len(pts) == 1:
            x, y = pts[0].split(",")
            c.parts.append(f'<circle cx="{x}" cy="{y}" r="3" fill="{colour}"/>')
        elif pts:
            c.parts.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
    c.legend(names)
    return c.render()


def bar_chart_svg(labels: list[str], values: list[float], errors: list[float] | None = None,
                  title: str = "", ylabel: str = "") -> str:
    c = _Canvas(title, "", ylabel)
    if not labels:
        c.set_range(0.0, 1.0, 0.0, 1.0)
        c.axes(xticks=False)
        return c.render()
    errors = errors or [0.0] * len(values)
    hi = max(v + e for v, e in zip(values, errors))
    lo = min(0.0, min(v - e for v, e in zip(values, errors)))
    c.set_range(0.0, float(len(labels)), lo, hi * 1.05 if hi > 0 else 1.0)
    c.axes(xticks=False)
    w = 0.6
    for i, (lab, v, e) in enumerate(zip(labels, values, errors)):
        x0, x1 = c.sx(i + 0.5 - w / 2), c.sx(i + 0.5 + w / 2)
        y0, y1 = c.sy(max(v, 0.0)), c.sy(min(v, 0.0))
        colour = PALETTE[i % len(PALETTE)]
        c.parts.append(f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(x1 - x0)}" height="{_f(y1 - y0)}" fill="{colour}"/>')
        if e:
            xm = _f(c.sx(i + 0.5))
            c.parts.append(f'<line x1="{xm}" y1="{_f(c.sy(v - e))}" x2="{xm}" y2="{_f(c.sy(v + e))}" stroke="black"/>')
        c.parts.append(f'<text x="{_f(c.sx(i + 0.5))}" y="{c.T + c.ph + 16}" text-anchor="middle">{_escape(lab)}</text>')
    return c.render()


def plot_svg(series: dict, path, title: str = "", xlabel: str = "x", ylabel: str = "y", bands=None) -> Path:
    return atomic_write(path, line_chart_svg(series, title, xlabel, ylabel, bands))
