"""Tiny static SVG scatter plot (no plotting dependency)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

W, H, PAD = 640, 420, 60


def _scale(vals, lo_px, hi_px):
    lo, hi = min(vals), max(vals)
    span = (hi - lo) or 1.0
    return lambda v: lo_px + (v - lo) / span * (hi_px - lo_px)


def scatter_svg(series, path, xlabel="cost", ylabel="quality", title=""):
    """``series`` maps a label to ``(xs, ys, connect)``; connected series are drawn as lines."""
    xs_all = [x for xs, _, _ in series.values() for x in xs]
    ys_all = [y for _, ys, _ in series.values() for y in ys]
    if not xs_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    fx = _scale(xs_all, PAD, W - PAD)
    fy = _scale(ys_all, H - PAD, PAD)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="15" y="{H / 2}" transform="rotate(-90 15 {H / 2})" text-anchor="middle">{escape(ylabel)}</text>',
           f'<text x="{W / 2}" y="25" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for v, anchor, x, y in ((min(xs_all), "start", PAD, H - PAD + 16), (max(xs_all), "end", W - PAD, H - PAD + 16)):
        out.append(f'<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.4g}</text>')
    for v, y in ((min(ys_all), H - PAD), (max(ys_all), PAD)):
        out.append(f'<text x="{PAD - 5}" y="{y}" text-anchor="end">{v:.4g}</text>')
    for i, (label, (xs, ys, connect)) in enumerate(series.items()):
        c = colors[i % len(colors)]
        pts = [(fx(x), fy(y)) for x, y in zip(xs, ys)]
        if connect and len(pts) > 1:
            coords = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        out.extend(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{c}"/>' for x, y in pts)
        out.append(f'<text x="{W - PAD - 120}" y="{PAD + 16 * i}" fill="{c}">{escape(label)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
    return path
