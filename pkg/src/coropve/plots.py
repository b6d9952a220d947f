"""Minimal hand-written SVG line plots (no plotting dependency, byte-stable)."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, PAD = 480, 360, 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def line_plot(series, x_range, y_range, title: str = "", x_label: str = "", y_label: str = "", markers=()) -> str:
    """``series`` is a list of ``(label, xs, ys)``; ``markers`` of ``(x, y)`` points."""
    x0, x1 = x_range
    y0, y1 = y_range
    sx = (WIDTH - 2 * PAD) / ((x1 - x0) or 1.0)
    sy = (HEIGHT - 2 * PAD) / ((y1 - y0) or 1.0)

    def px(x, y):
        return PAD + (x - x0) * sx, HEIGHT - PAD - (y - y0) * sy

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="{PAD}" y="{PAD}" width="{WIDTH - 2 * PAD}" height="{HEIGHT - 2 * PAD}" fill="none" stroke="#000"/>',
        f'<text x="{WIDTH / 2}" y="{PAD / 2}" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(x_label)}</text>',
        f'<text x="12" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {HEIGHT / 2})">{escape(y_label)}</text>',
        f'<text x="{PAD}" y="{HEIGHT - PAD + 14}" font-size="10">{_fmt(x0)}</text>',
        f'<text x="{WIDTH - PAD}" y="{HEIGHT - PAD + 14}" text-anchor="end" font-size="10">{_fmt(x1)}</text>',
        f'<text x="{PAD - 4}" y="{HEIGHT - PAD}" text-anchor="end" font-size="10">{_fmt(y0)}</text>',
        f'<text x="{PAD - 4}" y="{PAD + 10}" text-anchor="end" font-size="10">{_fmt(y1)}</text>',
    ]
    for n, (label, xs, ys) in enumerate(series):
        color = COLORS[n % len(COLORS)]
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in (px(x, y) for x, y in zip(xs, ys)))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(
            f'<text x="{WIDTH - PAD - 4}" y="{PAD + 14 + 14 * n}" text-anchor="end" font-size="11" fill="{color}">{escape(label)}</text>'
        )
    for x, y in markers:
        cx, cy = px(x, y)
        out.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="2.5" fill="#d62728"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def roc_svg(curves) -> str:
    """``curves``: list of ``(label, RocCurve)``."""
    series = [(f"{label} (AUC {c.auc:.3f})", c.fpr, c.tpr) for label, c in curves]
    series.append(("chance", [0.0, 1.0], [0.0, 1.0]))
    return line_plot(series, (0.0, 1.0), (0.0, 1.0), "ROC", "1 - specificity", "sensitivity")


def profile_svg(profile, model, title: str = "") -> str:
    s = profile.arc_length
    inten = profile.intensity
    expected = model.expected(s)
    lo = float(min(inten.min(), expected.min()))
    hi = float(max(inten.max(), expected.max()))
    pad = 0.05 * (hi - lo or 1.0)
    flagged = [(a, b) for a, b, f in zip(s, inten, model.pve_mask) if f]
    return line_plot(
        [("centerline HU", s, inten), ("model", s, expected)],
        (float(s[0]), float(s[-1])),
        (lo - pad, hi + pad),
        title,
        "arc length (mm)",
        "HU",
        markers=flagged,
    )
