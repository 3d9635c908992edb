"""Minimal SVG output: a two-row Gantt chart and a matrix heatmap."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

_COLORS = {"seg": "#8c6bb1", "pm": "#2b8cbe", "pn": "#e34a33", "head": "#636363"}


def _color(stage_id: str) -> str:
    return _COLORS.get(stage_id.split("_", 1)[0], "#969696")


def gantt_svg(timeline, width: int = 900, row_height: int = 36, title: str = "") -> str:
    """One row per processor, one rect per stage, x scaled to the makespan."""
    procs = ("A", "B")
    left, top = 40, 30 if title else 10
    span = timeline.makespan or 1.0
    scale = (width - left - 10) / span
    height = top + row_height * len(procs) + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="10">']
    if title:
        out.append(f'<text x="{left}" y="18" font-size="13">{escape(title)}</text>')
    for row, proc in enumerate(procs):
        y = top + row * row_height
        out.append(f'<text x="5" y="{y + row_height / 2 + 4}">{proc}</text>')
        out.append(f'<rect x="{left}" y="{y}" width="{span * scale:.2f}" height="{row_height - 4}" '
                   f'fill="#f0f0f0"/>')
    for sid, (start, end) in sorted(timeline.intervals.items(), key=lambda kv: kv[1]):
        row = procs.index(timeline.procs[sid])
        y = top + row * row_height
        x, w = left + start * scale, max((end - start) * scale, 0.5)
        out.append(f'<rect x="{x:.2f}" y="{y}" width="{w:.2f}" height="{row_height - 4}" '
                   f'fill="{_color(sid)}" stroke="white"><title>{escape(sid)}: '
                   f'{start:g}-{end:g} ms</title></rect>')
        if w > 40:
            out.append(f'<text x="{x + 3:.2f}" y="{y + row_height / 2 + 2}" fill="white">'
                       f'{escape(sid)}</text>')
    axis_y = top + row_height * len(procs) + 15
    out.append(f'<text x="{left}" y="{axis_y}">0</text>')
    out.append(f'<text x="{width - 10}" y="{axis_y}" text-anchor="end">{timeline.makespan:g} ms</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap_svg(matrix, cell: int = 6, title: str = "") -> str:
    """Darker cells for larger values; the scale is linear from min to max."""
    m = np.asarray(matrix, dtype=np.float64)
    n_rows, n_cols = m.shape
    lo, hi = float(m.min()), float(m.max())
    rng = hi - lo or 1.0
    top = 24 if title else 0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{n_cols * cell}" '
           f'height="{n_rows * cell + top}" font-family="sans-serif" font-size="12">']
    if title:
        out.append(f'<text x="2" y="16">{escape(title)}</text>')
    for i in range(n_rows):
        for j in range(n_cols):
            shade = int(round(255 * (1 - (m[i, j] - lo) / rng)))
            out.append(f'<rect x="{j * cell}" y="{i * cell + top}" width="{cell}" height="{cell}" '
                       f'fill="rgb({shade},{shade},255)"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
