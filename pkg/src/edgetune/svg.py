"""Minimal hand-written SVG charts (Gantt and grouped bars)."""

from __future__ import annotations

from xml.sax.saxutils import escape

COLORS = {
    "FwdCell": "#4c78a8", "BwdCell": "#f58518", "SendAct": "#72b7b2", "SendGrad": "#b279a2",
    "AllReduce": "#e45756", "Redistribute": "#9d755d", "CacheLoad": "#54a24b",
}
PALETTE = ("#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2")


def _doc(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]) + "\n"


def gantt(rows, makespan: int, title: str = "", width: int = 960) -> str:
    """``rows`` is a list of ``(label, main_events, side_events)``.

    Main events get a full-height cell with the micro-batch id; side events
    (transfers, collectives, disk reads) a thin strip underneath.
    """
    left, top, row_h, side_h = 90, 30, 26, 8
    span = max(makespan, 1)
    scale = (width - left - 10) / span
    body = []
    if title:
        body.append(f'<text x="{left}" y="18" font-size="13">{escape(title)}</text>')
    y = top
    for label, main, side in rows:
        body.append(f'<text x="4" y="{y + 17}">{escape(label)}</text>')
        for e in main:
            x, w = left + e.start_us * scale, max(e.duration_us * scale, 0.5)
            body.append(f'<rect class="{e.kind}" x="{x:.2f}" y="{y}" width="{w:.2f}" '
                        f'height="{row_h - 6}" fill="{COLORS[e.kind]}" stroke="white"/>')
            if e.micro_batch_id >= 0:
                body.append(f'<text class="cell-label" x="{x + w / 2:.2f}" y="{y + 14}" '
                            f'text-anchor="middle" fill="white">{e.micro_batch_id}</text>')
        for e in side:
            x, w = left + e.start_us * scale, max(e.duration_us * scale, 0.5)
            body.append(f'<rect class="{e.kind}" x="{x:.2f}" y="{y + row_h - 6}" '
                        f'width="{w:.2f}" height="{side_h - 2}" fill="{COLORS[e.kind]}"/>')
            if e.kind == "AllReduce":
                body.append(f'<text class="ar-label" x="{x + 1:.2f}" y="{y + row_h + 8}" '
                            f'font-size="8">AR</text>')
        y += row_h + side_h
    body.append(f'<text x="{left}" y="{y + 14}">makespan {makespan / 1000:.3f} ms</text>')
    return _doc(width, y + 24, body)


def bar_chart(categories: list[str], series: dict[str, list[float]], title: str = "",
              unit: str = "", width: int = 640, height: int = 320) -> str:
    """Grouped vertical bars, one group per category and one bar per series."""
    left, bottom, top = 60, 40, 40
    plot_h = height - bottom - top
    peak = max((v for vals in series.values() for v in vals), default=0) or 1.0
    group_w = (width - left - 10) / max(len(categories), 1)
    bar_w = group_w * 0.8 / max(len(series), 1)
    body = []
    if title:
        body.append(f'<text x="{left}" y="18" font-size="13">{escape(title)}</text>')
    body.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{width - 10}" y2="{top + plot_h}" '
                f'stroke="black"/>')
    body.append(f'<text x="4" y="{top + 10}">{escape(f"{peak:.3g} {unit}")}</text>')
    for s_idx, (name, values) in enumerate(series.items()):
        color = PALETTE[s_idx % len(PALETTE)]
        body.append(f'<rect x="{width - 150}" y="{6 + 12 * s_idx}" width="8" height="8" '
                    f'fill="{color}"/><text x="{width - 138}" y="{14 + 12 * s_idx}">'
                    f'{escape(name)}</text>')
        for c_idx, v in enumerate(values):
            h = plot_h * v / peak
            x = left + c_idx * group_w + group_w * 0.1 + s_idx * bar_w
            body.append(f'<rect class="bar" x="{x:.2f}" y="{top + plot_h - h:.2f}" '
                        f'width="{bar_w:.2f}" height="{h:.2f}" fill="{color}"/>')
    for c_idx, cat in enumerate(categories):
        x = left + (c_idx + 0.5) * group_w
        body.append(f'<text x="{x:.2f}" y="{top + plot_h + 16}" text-anchor="middle">'
                    f'{escape(cat)}</text>')
    return _doc(width, height, body)


def stack(parts: list[str]) -> str:
    """Concatenate standalone SVG documents vertically into one."""
    import re
    heights, inner, width = [], [], 0
    for part in parts:
        m = re.search(r'width="(\d+)" height="(\d+)"', part)
        w, h = int(m.group(1)), int(m.group(2))
        width = max(width, w)
        heights.append(h)
        inner.append(part.split("\n", 1)[1].rsplit("</svg>", 1)[0])
    body, y = [], 0
    for h, content in zip(heights, inner):
        body.append(f'<g transform="translate(0,{y})">{content}</g>')
        y += h
    return _doc(width, y, body)
