"""Deterministic SVG 1.1 line charts with a log-scaled y axis.

Coordinates are printed with fixed precision and series are emitted in the
order given, so the same inputs always produce byte-identical files.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]

W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 30, 50


def _f(v: float) -> str:
    return f"{v:.2f}"


def _log_ticks(lo: float, hi: float) -> list[float]:
    return [10.0**k for k in range(math.floor(math.log10(lo)), math.ceil(math.log10(hi)) + 1)]


def line_chart(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    title: str = "",
    xlabel: str = "images seen",
    ylabel: str = "energy distance",
    hline: Optional[float] = None,
    hline_label: str = "threshold",
) -> str:
    """Render ``[(name, xs, ys), ...]`` as an SVG document string.

    Nonpositive y values cannot be shown on a log axis and are skipped.
    """
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys) if y is not None and y > 0]
    if hline is not None and not math.isfinite(hline):
        hline = None
    if hline is not None and hline > 0:
        pts.append((pts[0][0] if pts else 0.0, hline))
    if not pts:
        pts = [(0.0, 1.0)]
    x0 = min(p[0] for p in pts)
    x1 = max(p[0] for p in pts)
    if x1 == x0:
        x1 = x0 + 1
    ly0 = math.log10(min(p[1] for p in pts))
    ly1 = math.log10(max(p[1] for p in pts))
    if ly1 - ly0 < 1e-9:
        ly0, ly1 = ly0 - 0.5, ly1 + 0.5
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + (ly1 - math.log10(y)) / (ly1 - ly0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.0f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _log_ticks(10**ly0, 10**ly1):
        if ly0 - 1e-9 <= math.log10(t) <= ly1 + 1e-9:
            y = py(t)
            out.append(f'<line x1="{LEFT - 4}" y1="{_f(y)}" x2="{LEFT + pw}" y2="{_f(y)}" stroke="#ddd"/>')
            out.append(f'<text x="{LEFT - 6}" y="{_f(y + 4)}" text-anchor="end">{t:g}</text>')
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        out.append(f'<text x="{_f(px(xv))}" y="{TOP + ph + 16}" text-anchor="middle">{xv:g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.0f}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{TOP + ph / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {TOP + ph / 2:.0f})">{escape(ylabel)} (log)</text>'
    )
    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = [f"{_f(px(x))},{_f(py(y))}" for x, y in zip(xs, ys) if y is not None and y > 0]
        if coords:
            out.append(
                f'<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" '
                f'points="{" ".join(coords)}"/>'
            )
        ly = TOP + 10 + 16 * i
        out.append(f'<line x1="{W - RIGHT + 10}" y1="{ly}" x2="{W - RIGHT + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{W - RIGHT + 35}" y="{ly + 4}">{escape(name)}</text>')
    if hline is not None and hline > 0:
        y = py(hline)
        out.append(
            f'<line class="threshold" x1="{LEFT}" y1="{_f(y)}" x2="{LEFT + pw}" y2="{_f(y)}" '
            'stroke="black" stroke-dasharray="5,4"/>'
        )
        out.append(f'<text x="{LEFT + pw - 4}" y="{_f(y - 4)}" text-anchor="end">{escape(hline_label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
