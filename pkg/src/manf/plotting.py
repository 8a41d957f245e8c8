"""Prediction-interval charts written directly as SVG."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, PAD = 720, 300, 40


def _scale(values: np.ndarray, lo: float, hi: float, out_lo: float, out_hi: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    return out_lo + (np.asarray(values, dtype=float) - lo) / span * (out_hi - out_lo)


def _points(xs, ys) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def interval_svg(q05, q25, q50, q75, q95, actual=None, title: str = "") -> str:
    """Median line with 50% and 90% bands; ``actual`` drawn when given."""
    q05, q25, q50, q75, q95 = (np.asarray(q, dtype=float) for q in (q05, q25, q50, q75, q95))
    k = len(q50)
    stack = [q05, q95] + ([np.asarray(actual, dtype=float)] if actual is not None else [])
    lo = float(min(np.min(s) for s in stack))
    hi = float(max(np.max(s) for s in stack))
    xs = _scale(np.arange(k), 0, max(k - 1, 1), PAD, WIDTH - PAD)

    def ys(v):
        return _scale(v, lo, hi, HEIGHT - PAD, PAD)

    def band(lower, upper, cls, fill):
        pts = _points(np.concatenate([xs, xs[::-1]]), np.concatenate([ys(upper), ys(lower)[::-1]]))
        return f'<polygon class="{cls}" points="{pts}" fill="{fill}" stroke="none"/>'

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{PAD}" y="20" font-family="sans-serif" font-size="13">{escape(title)}</text>',
        f'<line x1="{PAD}" y1="{HEIGHT - PAD}" x2="{WIDTH - PAD}" y2="{HEIGHT - PAD}" stroke="#888"/>',
        f'<text x="4" y="{PAD}" font-family="sans-serif" font-size="10">{hi:.3g}</text>',
        f'<text x="4" y="{HEIGHT - PAD}" font-family="sans-serif" font-size="10">{lo:.3g}</text>',
        band(q05, q95, "band90", "#c6dbef"),
        band(q25, q75, "band50", "#6baed6"),
        f'<polyline class="median" points="{_points(xs, ys(q50))}" fill="none" stroke="#08519c" stroke-width="2"/>',
    ]
    if actual is not None:
        parts.append(f'<polyline class="actual" points="{_points(xs, ys(actual))}" fill="none" '
                     f'stroke="#000" stroke-width="1.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_interval_svg(path, *quantiles, actual=None, title: str = "") -> Path:
    path = Path(path)
    path.write_text(interval_svg(*quantiles, actual=actual, title=title))
    return path
