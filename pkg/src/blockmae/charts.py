"""Static SVG line/scatter charts, no plotting dependency.

Charts are diffable text artifacts: fixed viewport, deterministic tick
placement, one palette color per series in insertion order.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#17becf", "#7f7f7f"]

_MARGIN = {"left": 62, "right": 16, "top": 34, "bottom": 46}


def _nice_step(span, target=5):
    raw = span / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw)) if raw > 0 else 1.0
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            return mult * mag
    return 10.0 * mag


def _ticks(lo, hi, target=5):
    if lo == hi:
        pad = max(0.5, abs(lo) * 0.1)
        lo, hi = lo - pad, hi + pad
    step = _nice_step(hi - lo, target)
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * max(1.0, abs(hi)):
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return lo, hi, ticks


def _fmt(v):
    return f"{v:g}"


def _data_range(series, axis):
    vals = [v for xs_ys in series.values() for v in xs_ys[axis]]
    if not vals:
        raise ValueError("chart has no data points")
    return min(vals), max(vals)


def _render(path, series, title, xlabel, ylabel, width, height, lines):
    xlo, xhi, xticks = _ticks(*_data_range(series, 0))
    ylo, yhi, yticks = _ticks(*_data_range(series, 1))
    px0, px1 = _MARGIN["left"], width - _MARGIN["right"]
    py0, py1 = height - _MARGIN["bottom"], _MARGIN["top"]

    def sx(x):
        return px0 + (x - xlo) / (xhi - xlo) * (px1 - px0)

    def sy(y):
        return py0 + (y - ylo) / (yhi - ylo) * (py1 - py0)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-size="13">{escape(title)}</text>',
    ]
    for t in xticks:
        x = sx(t)
        out.append(f'<line x1="{x:.2f}" y1="{py0}" x2="{x:.2f}" y2="{py1}" '
                   'stroke="#e0e0e0" stroke-width="1"/>')
        out.append(f'<text x="{x:.2f}" y="{py0 + 16}" text-anchor="middle">'
                   f'{escape(_fmt(t))}</text>')
    for t in yticks:
        y = sy(t)
        out.append(f'<line x1="{px0}" y1="{y:.2f}" x2="{px1}" y2="{y:.2f}" '
                   'stroke="#e0e0e0" stroke-width="1"/>')
        out.append(f'<text x="{px0 - 6}" y="{y + 4:.2f}" text-anchor="end">'
                   f'{escape(_fmt(t))}</text>')
    out.append(f'<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" '
               'stroke="black" stroke-width="1"/>')
    out.append(f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" '
               'stroke="black" stroke-width="1"/>')
    out.append(f'<text x="{(px0 + px1) / 2:.1f}" y="{height - 10}" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(py0 + py1) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(py0 + py1) / 2:.1f})">'
               f'{escape(ylabel)}</text>')

    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = [(sx(x), sy(y)) for x, y in zip(xs, ys)]
        if lines and len(pts) > 1:
            path_d = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            out.append(f'<polyline points="{path_d}" fill="none" '
                       f'stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" '
                       f'fill="{color}" data-series="{escape(name)}"/>')
        ly = _MARGIN["top"] + 14 * i
        out.append(f'<rect x="{px1 - 130}" y="{ly - 8}" width="9" height="9" '
                   f'fill="{color}"/>')
        out.append(f'<text x="{px1 - 117}" y="{ly}">{escape(name)}</text>')

    out.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(out))
    return path


def line_chart(path, series, title="", xlabel="", ylabel="",
               width=640, height=420):
    """series: {name: (xs, ys)}; one polyline + markers per entry."""
    return _render(path, series, title, xlabel, ylabel, width, height,
                   lines=True)


def scatter_chart(path, series, title="", xlabel="", ylabel="",
                  width=640, height=420):
    """series: {name: (xs, ys)}; markers only."""
    return _render(path, series, title, xlabel, ylabel, width, height,
                   lines=False)
