"""Minimal deterministic SVG line charts (no plotting dependency, no
timestamps, byte-stable output)."""

from __future__ import annotations

import math

W, H = 640, 400
PAD = 50
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _fmt(x):
    return f"{x:.6g}"


def line_chart(path, series, title="", xlabel="", ylabel=""):
    """series: list of (label, xs, ys). Writes a standalone SVG file."""
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys if not math.isnan(y)]
    if not xs_all or not ys_all:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)

    def sy(y):
        return H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{W // 2}" y="{H - 8}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="14" y="{H // 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {H // 2})">{ylabel}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{PAD}" y="{H - PAD + 16}" font-size="10">{_fmt(x0)}</text>',
        f'<text x="{W - PAD}" y="{H - PAD + 16}" text-anchor="end" font-size="10">{_fmt(x1)}</text>',
        f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end" font-size="10">{_fmt(y0)}</text>',
        f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end" font-size="10">{_fmt(y1)}</text>',
    ]
    for j, (label, xs, ys) in enumerate(series):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(
            f"{_fmt(sx(x))},{_fmt(sy(y))}"
            for x, y in zip(xs, ys) if not math.isnan(y)
        )
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{W - PAD - 4}" y="{PAD + 14 + 14 * j}" text-anchor="end" '
                     f'font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
