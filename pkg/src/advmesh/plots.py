"""Minimal SVG line charts, written straight from numbers."""

from __future__ import annotations

import math
import os
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def line_chart(series: dict[str, tuple[list[float], list[float]]], path: str | os.PathLike,
               title: str = "", xlabel: str = "", ylabel: str = "", width: int = 560, height: int = 360) -> None:
    """One polyline per named series; non-finite points are dropped."""
    pts = {k: [(x, y) for x, y in zip(*v) if math.isfinite(x) and math.isfinite(y)] for k, v in series.items()}
    xs = [p[0] for v in pts.values() for p in v] or [0.0, 1.0]
    ys = [p[1] for v in pts.values() for p in v] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    ml, mr, mt, mb = 60, 20, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for k in range(5):
        fx, fy = x0 + k * (x1 - x0) / 4, y0 + k * (y1 - y0) / 4
        out.append(f'<text x="{sx(fx):.1f}" y="{mt + ph + 15}" text-anchor="middle">{fx:.3g}</text>')
        out.append(f'<text x="{ml - 5}" y="{sy(fy) + 4:.1f}" text-anchor="end">{fy:.3g}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2})">{escape(ylabel)}</text>')
    out.append(f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    for i, (name, p) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        if p:
            poly = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in p)
            out.append(f'<polyline points="{poly}" fill="none" stroke="{color}" stroke-width="2"/>')
            out += [f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.5" fill="{color}"/>' for x, y in p]
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 14 * i}" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
