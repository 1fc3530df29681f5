"""Deterministic SVG line plots: one mean line and one +-1 sd band per series."""

from collections import defaultdict
from xml.sax.saxutils import escape

import numpy as np

from ..exceptions import ConfigError
from ..phantom import growth_to_week

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
WIDTH, HEIGHT = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 64, 170, 36, 52


def series_from_rows(rows, x="magnitude"):
    """Group rows by (method, mode, param) and reduce ``mean_dice`` per x value.

    ``x="param"`` plots the numeric value after ``=`` in the param column
    with one series per (method, shift magnitude); rows without a param are
    skipped. Returns ``[(label, xs, means, sds)]`` sorted by label.
    """
    groups = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if x == "param":
            if "=" not in r.param:
                continue
            key = (r.method, r.mode, f"{r.shift_kind} {r.magnitude:g}")
            xv = float(r.param.split("=")[1])
        else:
            key = (r.method, r.mode, r.param)
            xv = float(getattr(r, x))
        groups[key][xv].append(r.mean_dice)
    out = []
    for key in sorted(groups):
        label = " ".join(k for k in key if k)
        xs = sorted(groups[key])
        vals = [np.asarray(groups[key][v]) for v in xs]
        out.append((label, xs, [float(v.mean()) for v in vals], [float(v.std()) for v in vals]))
    return out


def _f(v):
    return f"{v:.2f}"


def render_svg(series, *, title="", xlabel="", ylabel="mean Dice", week_axis=False, log_x=False):
    """SVG text for ``series`` as produced by :func:`series_from_rows`."""
    if not series:
        raise ConfigError("nothing to plot")
    xs_all = np.array([x for s in series for x in s[1]], dtype=float)
    if log_x:
        if np.any(xs_all <= 0):
            raise ConfigError("log x-axis needs positive x values")
        tx = np.log10
    else:
        def tx(v):
            return np.asarray(v, dtype=float)
    x0, x1 = float(tx(xs_all.min())), float(tx(xs_all.max()))
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    lo = min(min(m - s for m, s in zip(ser[2], ser[3])) for ser in series)
    hi = max(max(m + s for m, s in zip(ser[2], ser[3])) for ser in series)
    y0, y1 = min(0.0, lo), max(1.0, hi)
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(v):
        return LEFT + (float(tx(v)) - x0) / (x1 - x0) * pw

    def py(v):
        return TOP + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for v in np.linspace(y0, y1, 6):
        y = py(v)
        out.append(f'<line x1="{LEFT - 4}" y1="{_f(y)}" x2="{LEFT}" y2="{_f(y)}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{_f(y + 4)}" text-anchor="end">{v:.2f}</text>')
    ticks = sorted(set(xs_all.tolist()))
    for v in ticks:
        x = px(v)
        label = f"{float(growth_to_week(v)):.1f}" if week_axis else f"{v:g}"
        out.append(f'<line x1="{_f(x)}" y1="{TOP + ph}" x2="{_f(x)}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{_f(x)}" y="{TOP + ph + 18}" text-anchor="middle">{label}</text>')
    if week_axis and not xlabel:
        xlabel = "gestational week (18-26 scale)"
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.2f})">{escape(ylabel)}</text>')
    for i, (label, xs, means, sds) in enumerate(series):
        colour = PALETTE[i % len(PALETTE)]
        upper = [f"{_f(px(x))},{_f(py(m + s))}" for x, m, s in zip(xs, means, sds)]
        lower = [f"{_f(px(x))},{_f(py(m - s))}" for x, m, s in zip(xs, means, sds)]
        out.append(f'<polygon points="{" ".join(upper + lower[::-1])}" fill="{colour}" '
                   f'fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{_f(px(x))},{_f(py(m))}" for x, m in zip(xs, means))
        out.append(f'<polyline points="{line}" fill="none" stroke="{colour}" stroke-width="2"/>')
        ly = TOP + 14 + 18 * i
        out.append(f'<line x1="{WIDTH - RIGHT + 12}" y1="{ly}" x2="{WIDTH - RIGHT + 32}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - RIGHT + 38}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, svg):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
