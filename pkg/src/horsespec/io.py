"""Deterministic JSON, CSV and SVG writers."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _canon(obj, out: list):
    if isinstance(obj, dict):
        out.append("{")
        for i, k in enumerate(sorted(obj, key=str)):
            if i:
                out.append(",")
            out.append(json.dumps(str(k)))
            out.append(":")
            _canon(obj[k], out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _canon(v, out)
        out.append("]")
    elif isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif obj is None:
        out.append("null")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(fmt_float(obj) if math.isfinite(obj) else "null")
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, floats with 17 significant digits, NaN/inf as null."""
    out: list = []
    _canon(obj, out)
    return "".join(out)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def write_json(path: Path, obj) -> Path:
    path.write_text(canonical_json(obj) + "\n", encoding="utf-8", newline="\n")
    return path


CSV_COLUMNS = ("w1", "w2", "H", "status", "p", "q")


def spectrum_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        cells = []
        for c in CSV_COLUMNS:
            v = r[c]
            if isinstance(v, str):
                cells.append(v)
            elif v is None or not math.isfinite(v):
                cells.append("")
            else:
                cells.append(fmt_float(v))
        w.writerow(cells)
    return buf.getvalue()


def write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


# -- SVG ------------------------------------------------------------------------


class SvgCanvas:
    """Static SVG 1.1 drawing in data coordinates (y up), viewBox fitted to the data."""

    def __init__(self, bounds, size=600, pad=0.06):
        x0, x1, y0, y1 = bounds
        dx, dy = (x1 - x0) or 1.0, (y1 - y0) or 1.0
        self.x0, self.y1 = x0 - pad * dx, y1 + pad * dy
        self.w, self.h = dx * (1 + 2 * pad), dy * (1 + 2 * pad)
        self.scale = size / max(self.w, self.h)
        self.items: list = []

    def _p(self, x, y):
        return (x - self.x0) * self.scale, (self.y1 - y) * self.scale

    def polygon(self, pts, fill="#cfe3f5", stroke="#1f4e79", width=1.5):
        s = " ".join("{:.6f},{:.6f}".format(*self._p(x, y)) for x, y in pts)
        self.items.append(f'<polygon points="{s}" fill="{fill}" stroke="{stroke}" stroke-width="{width}"/>')

    def rect(self, r, fill="none", stroke="#000", width=0.5, opacity=1.0):
        x0, x1, y0, y1 = r
        X0, Y1 = self._p(x0, y1)
        self.items.append(
            f'<rect x="{X0:.6f}" y="{Y1:.6f}" width="{(x1 - x0) * self.scale:.6f}" '
            f'height="{(y1 - y0) * self.scale:.6f}" fill="{fill}" stroke="{stroke}" '
            f'stroke-width="{width}" fill-opacity="{opacity}"/>'
        )

    def point(self, x, y, label=None, r=3.0, color="#b22222"):
        X, Y = self._p(x, y)
        self.items.append(f'<circle cx="{X:.6f}" cy="{Y:.6f}" r="{r}" fill="{color}"/>')
        if label:
            self.items.append(f'<text x="{X + 5:.6f}" y="{Y - 5:.6f}" font-size="11" font-family="sans-serif">{label}</text>')

    def render(self) -> str:
        W, H = self.w * self.scale, self.h * self.scale
        head = (
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
            f'width="{W:.3f}" height="{H:.3f}" viewBox="0 0 {W:.6f} {H:.6f}">\n'
        )
        return head + "\n".join(self.items) + "\n</svg>\n"


def polygon_svg(vertices, labels: dict) -> str:
    """Filled polygon plus labelled points; ``labels`` maps name -> (x, y)."""
    pts = np.asarray(vertices, dtype=float).reshape(-1, 2)
    allp = np.vstack([pts] + [np.asarray(v, float).reshape(1, 2) for v in labels.values()])
    c = SvgCanvas((allp[:, 0].min(), allp[:, 0].max(), allp[:, 1].min(), allp[:, 1].max()))
    if len(pts) >= 3:
        c.polygon(pts)
    for name, (x, y) in labels.items():
        c.point(x, y, name)
    return c.render()


def boxes_svg(rects_by_level: dict, strips=None) -> str:
    """Surgery boxes (outer and inner) of each level inside the unit square."""
    c = SvgCanvas((0.0, 1.0, 0.0, 1.0))
    c.rect((0, 1, 0, 1), stroke="#555", width=1.0)
    if strips:
        for r in strips:
            c.rect(r, fill="#eeeeee", stroke="#999", width=0.3, opacity=0.6)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    for k in sorted(rects_by_level):
        col = colors[(k - 1) % len(colors)]
        for outer, inner in rects_by_level[k]:
            c.rect(outer, stroke=col, width=0.4)
            c.rect(inner, fill=col, stroke="none", width=0.0, opacity=0.35)
    return c.render()
