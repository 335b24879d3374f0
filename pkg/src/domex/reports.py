"""Report emission: CSV tables, JSON summaries, and hand-rolled SVG plots.

Everything renders to bytes first so callers can compare against existing
artifacts before writing (idempotent reruns, refuse-to-overwrite).
"""

from __future__ import annotations

import csv
import io
import json
from typing import Sequence


def render_csv(fieldnames: Sequence[str], rows: Sequence[dict]) -> bytes:
    buffer = io.StringIO(newline="")
    writer = csv.DictWriter(buffer, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue().encode("utf-8")


def render_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=False) + "\n").encode("utf-8")


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _format(v: float) -> str:
    return f"{v:.2f}"


def render_svg_line_plot(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    *,
    title: str,
    x_label: str,
    y_label: str,
    width: int = 640,
    height: int = 420,
) -> bytes:
    """Minimal line plot: one polyline per series, axes, ticks, legend."""
    margin_left, margin_right, margin_top, margin_bottom = 70, 30, 50, 60
    plot_w = width - margin_left - margin_right
    plot_h = height - margin_top - margin_bottom
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x_min, x_max = min(xs_all), max(xs_all)
    y_min, y_max = min(ys_all), max(ys_all)
    if x_max == x_min:
        x_max = x_min + 1.0
    if y_max == y_min:
        y_max = y_min + 1.0
    y_pad = 0.08 * (y_max - y_min)
    y_min -= y_pad
    y_max += y_pad

    def sx(x: float) -> float:
        return margin_left + (x - x_min) / (x_max - x_min) * plot_w

    def sy(y: float) -> float:
        return margin_top + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{margin_left}" y1="{margin_top + plot_h}" x2="{margin_left + plot_w}" '
        f'y2="{margin_top + plot_h}" stroke="black"/>',
        f'<line x1="{margin_left}" y1="{margin_top}" x2="{margin_left}" '
        f'y2="{margin_top + plot_h}" stroke="black"/>',
    ]
    for i in range(5):
        xv = x_min + i * (x_max - x_min) / 4
        yv = y_min + i * (y_max - y_min) / 4
        parts.append(
            f'<text x="{_format(sx(xv))}" y="{margin_top + plot_h + 20}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{xv:.3g}</text>'
        )
        parts.append(
            f'<text x="{margin_left - 8}" y="{_format(sy(yv))}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{yv:.3g}</text>'
        )
        parts.append(
            f'<line x1="{margin_left}" y1="{_format(sy(yv))}" x2="{margin_left + plot_w}" '
            f'y2="{_format(sy(yv))}" stroke="#dddddd"/>'
        )
    parts.append(
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{x_label}</text>'
    )
    parts.append(
        f'<text x="18" y="{height / 2:.0f}" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif" transform="rotate(-90 18 {height / 2:.0f})">{y_label}</text>'
    )
    for index, (name, xs, ys) in enumerate(series):
        color = _PALETTE[index % len(_PALETTE)]
        points = " ".join(f"{_format(sx(x))},{_format(sy(y))}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline class="series" fill="none" stroke="{color}" stroke-width="2" '
            f'points="{points}"/>'
        )
        for x, y in zip(xs, ys):
            parts.append(
                f'<circle cx="{_format(sx(x))}" cy="{_format(sy(y))}" r="3" fill="{color}"/>'
            )
        legend_y = margin_top + 16 * index
        parts.append(
            f'<rect x="{margin_left + plot_w - 150}" y="{legend_y - 9}" width="12" height="12" '
            f'fill="{color}"/>'
        )
        parts.append(
            f'<text x="{margin_left + plot_w - 132}" y="{legend_y + 2}" font-size="12" '
            f'font-family="sans-serif">{name}</text>'
        )
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode("utf-8")
