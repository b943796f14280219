"""Tiny deterministic SVG line plots.

No rendering dependencies: output is plain SVG text with fixed float
formatting, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInput

WIDTH = 640
PANEL_HEIGHT = 400
MARGIN = 52
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _scale(vals, lo, hi, out_lo, out_hi):
    span = hi - lo
    if span <= 0.0:
        span = 1.0
    return out_lo + (np.asarray(vals, dtype=float) - lo) * (out_hi - out_lo) / span


def _panel(series, title, xlabel, ylabel, y0):
    """SVG elements for one axes block starting at vertical offset y0."""
    if not series:
        raise InvalidInput("need at least one series")
    for label, xs, ys in series:
        if len(xs) != len(ys) or len(xs) == 0:
            raise InvalidInput(f"series {label!r} must be non-empty and aligned")
    all_x = np.concatenate([np.asarray(s[1], dtype=float) for s in series])
    all_y = np.concatenate([np.asarray(s[2], dtype=float) for s in series])
    if not (np.all(np.isfinite(all_x)) and np.all(np.isfinite(all_y))):
        raise InvalidInput("non-finite plot data")
    x_lo, x_hi = float(np.min(all_x)), float(np.max(all_x))
    y_lo, y_hi = float(np.min(all_y)), float(np.max(all_y))
    left, right = MARGIN, WIDTH - 16
    top, bottom = y0 + 28, y0 + PANEL_HEIGHT - MARGIN
    mid_y = (top + bottom) // 2
    out = [
        f'<text x="{WIDTH // 2}" y="{y0 + 18}" text-anchor="middle" '
        f'font-family="monospace" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" '
        f'stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" '
        f'stroke="black"/>',
        f'<text x="{(left + right) // 2}" y="{y0 + PANEL_HEIGHT - 12}" '
        f'text-anchor="middle" font-family="monospace" font-size="12">'
        f'{xlabel}</text>',
        f'<text x="14" y="{mid_y}" text-anchor="middle" '
        f'font-family="monospace" font-size="12" '
        f'transform="rotate(-90 14 {mid_y})">{ylabel}</text>',
        f'<text x="{left}" y="{bottom + 16}" font-family="monospace" '
        f'font-size="10">{_fmt(x_lo)}</text>',
        f'<text x="{right}" y="{bottom + 16}" text-anchor="end" '
        f'font-family="monospace" font-size="10">{_fmt(x_hi)}</text>',
        f'<text x="{left - 4}" y="{bottom}" text-anchor="end" '
        f'font-family="monospace" font-size="10">{_fmt(y_lo)}</text>',
        f'<text x="{left - 4}" y="{top + 10}" text-anchor="end" '
        f'font-family="monospace" font-size="10">{_fmt(y_hi)}</text>',
    ]
    for k, (label, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        px = _scale(xs, x_lo, x_hi, left, right)
        py = _scale(ys, y_lo, y_hi, bottom, top)
        if len(px) == 1:
            out.append(f'<circle cx="{_fmt(px[0])}" cy="{_fmt(py[0])}" r="3" '
                       f'fill="{color}"/>')
        else:
            pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(px, py))
            out.append(f'<polyline points="{pts}" fill="none" '
                       f'stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{right - 6}" y="{top + 14 + 14 * k}" '
                   f'text-anchor="end" font-family="monospace" font-size="11" '
                   f'fill="{color}">{label}</text>')
    return out


def stacked_plot(panels) -> str:
    """panels: list of (series, title, xlabel, ylabel); one SVG document."""
    if not panels:
        raise InvalidInput("need at least one panel")
    height = PANEL_HEIGHT * len(panels)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{height}" viewBox="0 0 {WIDTH} {height}">',
        f'<rect width="{WIDTH}" height="{height}" fill="white"/>',
    ]
    for k, (series, title, xlabel, ylabel) in enumerate(panels):
        out.extend(_panel(series, title, xlabel, ylabel, k * PANEL_HEIGHT))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_plot(series, title: str, xlabel: str, ylabel: str) -> str:
    """series: list of (label, xs, ys). Returns the SVG document text."""
    return stacked_plot([(series, title, xlabel, ylabel)])


def write_plot(path, series, title, xlabel, ylabel):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(line_plot(series, title, xlabel, ylabel))
