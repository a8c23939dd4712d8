"""Minimal SVG writer for two-colour classification plots."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

GOOD = "#1f5fbf"
BAD = "#c62828"


def scatter_plot(
    x: Sequence[float],
    y: Sequence[float],
    ok: Sequence[bool],
    line: tuple[Sequence[float], Sequence[float]] | None = None,
    xlabel: str = "",
    ylabel: str = "",
    title: str = "",
    width: int = 480,
    height: int = 360,
    radius: float = 2.5,
) -> str:
    """Blue/red scatter of ``(x, y)`` with an optional black polyline on top."""
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    allx, ally = xs, ys
    if line is not None:
        allx = np.concatenate([xs, np.asarray(line[0], dtype=float)])
        ally = np.concatenate([ys, np.asarray(line[1], dtype=float)])
    pad = 48
    x0, x1 = _bounds(allx)
    y0, y1 = _bounds(ally)

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def py(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
        'fill="none" stroke="#444" stroke-width="1"/>',
    ]
    for a, b, good in zip(xs, ys, ok):
        out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="{radius}" fill="{GOOD if good else BAD}"/>')
    if line is not None and len(line[0]) > 1:
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(*line))
        out.append(f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1.2"/>')
    out.append(_text(width / 2, height - 12, xlabel))
    out.append(_text(14, height / 2, ylabel, rotate=True))
    out.append(_text(width / 2, 24, title))
    out.append(_text(pad, height - pad + 16, f"{x0:.4g}", anchor="start", size=10))
    out.append(_text(width - pad, height - pad + 16, f"{x1:.4g}", anchor="end", size=10))
    out.append(_text(pad - 4, height - pad, f"{y0:.4g}", anchor="end", size=10))
    out.append(_text(pad - 4, pad + 10, f"{y1:.4g}", anchor="end", size=10))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _bounds(v):
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - 0.03 * span, hi + 0.03 * span


def _text(x, y, s, anchor="middle", size=12, rotate=False):
    if not s:
        return ""
    tr = f' transform="rotate(-90 {x:.1f} {y:.1f})"' if rotate else ""
    return (f'<text x="{x:.1f}" y="{y:.1f}" font-family="sans-serif" font-size="{size}" '
            f'text-anchor="{anchor}"{tr}>{escape(s)}</text>')
