"""Minimal SVG line plots for gap-versus-iteration curves.

Each series is one <polyline> whose point coordinates are the raw data pair
(iteration, log10(gap)); an enclosing group transform maps data space to the
canvas.  That keeps the plot diffable and lets tests verify the polyline
against the CSV values structurally instead of by pixels.
"""

from __future__ import annotations

import math
from xml.etree import ElementTree

SERIES_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _log10(values, floor=1e-300):
    return [math.log10(max(v, floor)) for v in values]


def write_gap_plot(path, series, title="FW gap (log scale) vs outer iteration"):
    """series: list of (label, gap_values); gaps are log-transformed here."""
    width, height, margin = 720.0, 480.0, 60.0
    data = []
    for label, gaps in series:
        ys = _log10(gaps)
        xs = list(range(len(ys)))
        data.append((label, xs, ys))

    all_x = [x for _, xs, _ in data for x in xs]
    all_y = [y for _, _, ys in data for y in ys]
    x_lo, x_hi = min(all_x, default=0), max(all_x, default=1)
    y_lo, y_hi = min(all_y, default=0), max(all_y, default=1)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1
    sx = (width - 2 * margin) / (x_hi - x_lo)
    sy = (height - 2 * margin) / (y_hi - y_lo)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}">',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<text x="{width / 2:.0f}" y="{height - 12:.0f}" text-anchor="middle" font-size="12">outer iteration</text>',
        f'<text x="18" y="{height / 2:.0f}" text-anchor="middle" font-size="12" transform="rotate(-90 18 {height / 2:.0f})">log10 best FW gap</text>',
        f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" height="{height - 2 * margin}" fill="none" stroke="#999"/>',
        # Data-space group: y grows upward, so the y scale is negated.
        f'<g transform="translate({margin - x_lo * sx},{height - margin + y_lo * sy}) scale({sx},{-sy})">',
    ]
    for idx, (label, xs, ys) in enumerate(data):
        color = SERIES_COLORS[idx % len(SERIES_COLORS)]
        pts = " ".join(f"{x},{y!r}" for x, y in zip(xs, ys))
        lines.append(
            f'<polyline id="series-{label}" fill="none" stroke="{color}" '
            f'stroke-width="{2.0 / max(sx, sy):.6g}" points="{pts}"/>'
        )
    lines.append("</g>")
    for idx, (label, _, _) in enumerate(data):
        color = SERIES_COLORS[idx % len(SERIES_COLORS)]
        y = margin + 16 + 16 * idx
        lines.append(f'<rect x="{width - margin - 110:.0f}" y="{y - 9:.0f}" width="12" height="4" fill="{color}"/>')
        lines.append(f'<text x="{width - margin - 92:.0f}" y="{y:.0f}" font-size="12">{label}</text>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_series_points(path):
    """Parse {series label: [(x, y), ...]} back out of a plot file."""
    tree = ElementTree.parse(path)
    ns = "{http://www.w3.org/2000/svg}"
    out = {}
    for poly in tree.iter(f"{ns}polyline"):
        label = poly.get("id", "")
        if not label.startswith("series-"):
            continue
        pts = []
        for token in poly.get("points", "").split():
            x_str, y_str = token.split(",")
            pts.append((float(x_str), float(y_str)))
        out[label[len("series-") :]] = pts
    return out
