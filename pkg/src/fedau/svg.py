"""Static SVG line charts with no plotting dependency.

Output is a pure function of the input series: no timestamps, fixed
960x540 canvas, fixed palette, fixed number formatting.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

WIDTH, HEIGHT = 960, 540
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 90, 220, 50, 70

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf"]


def _escape(text: str) -> str:
    return (
        text.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _nice_ticks(lo: float, hi: float, count: int = 6) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-12 * step:
        ticks.append(round(v, 12))
        v += step
    return ticks


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.0e}"
    return f"{v:g}"


def line_chart(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    title: str = "",
    x_label: str = "round",
    y_label: str = "",
    log_y: bool = False,
) -> str:
    """Render ``(name, xs, ys)`` curves into an SVG document string.

    With ``log_y`` nonpositive values are dropped from the curves.
    """
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    cleaned = []
    for name, xs, ys in series:
        pts = [(float(x), float(y)) for x, y in zip(xs, ys) if math.isfinite(y) and (y > 0 or not log_y)]
        cleaned.append((name, pts))
    all_x = [x for _, pts in cleaned for x, _ in pts]
    all_y = [y for _, pts in cleaned for _, y in pts]
    if not all_x:
        all_x, all_y = [0.0, 1.0], [1.0, 10.0] if log_y else [0.0, 1.0]

    x_lo, x_hi = min(all_x), max(all_x)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if log_y:
        y_lo = math.floor(math.log10(min(all_y)))
        y_hi = math.ceil(math.log10(max(all_y)))
        if y_hi == y_lo:
            y_hi = y_lo + 1
        y_ticks = [float(e) for e in range(int(y_lo), int(y_hi) + 1)]
    else:
        y_lo, y_hi = min(all_y), max(all_y)
        if y_hi == y_lo:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
        pad = 0.05 * (y_hi - y_lo)
        y_lo, y_hi = y_lo - pad, y_hi + pad
        y_ticks = _nice_ticks(y_lo, y_hi)

    def px(x: float) -> float:
        return MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        v = math.log10(y) if log_y else y
        return MARGIN_TOP + plot_h - (v - y_lo) / (y_hi - y_lo) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        '<rect x="0" y="0" width="100%" height="100%" fill="#ffffff"/>',
        f'<text x="{MARGIN_LEFT + plot_w / 2:.1f}" y="30" text-anchor="middle" font-size="18" font-family="sans-serif">{_escape(title)}</text>',
    ]
    for tick in y_ticks:
        y = MARGIN_TOP + plot_h - (tick - y_lo) / (y_hi - y_lo) * plot_h
        label = f"1e{int(tick)}" if log_y else _fmt(tick)
        out.append(f'<line x1="{MARGIN_LEFT}" y1="{y:.2f}" x2="{MARGIN_LEFT + plot_w}" y2="{y:.2f}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{MARGIN_LEFT - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="12" font-family="sans-serif">{label}</text>')
    for tick in _nice_ticks(x_lo, x_hi):
        x = px(tick)
        out.append(f'<line x1="{x:.2f}" y1="{MARGIN_TOP}" x2="{x:.2f}" y2="{MARGIN_TOP + plot_h}" stroke="#f0f0f0"/>')
        out.append(f'<text x="{x:.2f}" y="{MARGIN_TOP + plot_h + 18}" text-anchor="middle" font-size="12" font-family="sans-serif">{_fmt(tick)}</text>')
    out.append(f'<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333333"/>')
    out.append(f'<text x="{MARGIN_LEFT + plot_w / 2:.1f}" y="{HEIGHT - 20}" text-anchor="middle" font-size="14" font-family="sans-serif">{_escape(x_label)}</text>')
    out.append(
        f'<text x="20" y="{MARGIN_TOP + plot_h / 2:.1f}" text-anchor="middle" font-size="14" font-family="sans-serif" '
        f'transform="rotate(-90 20 {MARGIN_TOP + plot_h / 2:.1f})">{_escape(y_label)}</text>'
    )

    for idx, (name, pts) in enumerate(cleaned):
        color = COLORS[idx % len(COLORS)]
        if pts:
            path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{path}"/>')
        ly = MARGIN_TOP + 10 + 22 * idx
        lx = MARGIN_LEFT + plot_w + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 24}" y2="{ly}" stroke="{color}" stroke-width="3"/>')
        out.append(f'<text x="{lx + 30}" y="{ly + 4}" font-size="12" font-family="sans-serif">{_escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_line_chart(path, series, **kwargs) -> Path:
    path = Path(path)
    path.write_text(line_chart(series, **kwargs))
    return path
