"""Self-contained SVG line and bar charts from CSV columns. No scripting, no external assets."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=60, right=150, top=40, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def read_csv(path: str | Path, where: dict[str, str] | None = None) -> tuple[list[str], list[dict[str, str]]]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if not reader.fieldnames:
        raise ValueError(f"{path}: empty CSV")
    rows = list(reader)
    if where:
        for key in where:
            if key not in reader.fieldnames:
                raise ValueError(f"unknown column {key!r}")
        rows = [r for r in rows if all(r[k] == v for k, v in where.items())]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return list(reader.fieldnames), rows


def _check(columns: Sequence[str], wanted: Sequence[str]) -> None:
    missing = [c for c in wanted if c not in columns]
    if missing:
        raise ValueError(f"unknown column(s): {', '.join(missing)}")


def _num(s: str) -> float | None:
    try:
        return float(s)
    except ValueError:
        return None


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _frame(title: str, lo: float, hi: float) -> list[str]:
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    x0, y0 = MARGIN["left"], MARGIN["top"]
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">'
        f"{escape(title)}</text>",
        f'<line x1="{x0}" y1="{y0 + ph}" x2="{x0 + pw}" y2="{y0 + ph}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 + ph}" stroke="black"/>',
    ]
    for i in range(5):
        v = lo + (hi - lo) * i / 4
        y = y0 + ph - ph * i / 4
        out.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
        out.append(
            f'<text x="{x0 - 6}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">'
            f"{_fmt(v)}</text>"
        )
    return out


def _legend(names: Sequence[str]) -> list[str]:
    x = WIDTH - MARGIN["right"] + 12
    out = []
    for i, name in enumerate(names):
        y = MARGIN["top"] + 16 * i
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{x}" y="{y}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{x + 14}" y="{y + 9}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    return out


def _range(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(min(values), 0.0), max(values)
    if hi == lo:
        hi = lo + 1.0
    return lo, hi


def line_chart(columns, rows, x: str, ys: Sequence[str], title: str = "") -> str:
    _check(columns, [x, *ys])
    pts = []
    for r in rows:
        xv = _num(r[x])
        if xv is None:
            continue
        pts.append((xv, [_num(r[y]) for y in ys]))
    if not pts:
        raise ValueError(f"column {x!r} has no numeric values")
    pts.sort(key=lambda p: p[0])
    all_y = [v for _, vals in pts for v in vals if v is not None]
    if not all_y:
        raise ValueError("no numeric y values")
    lo, hi = _range(all_y)
    xlo, xhi = pts[0][0], pts[-1][0]
    if xhi == xlo:
        xhi = xlo + 1.0
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(v):
        return MARGIN["left"] + pw * (v - xlo) / (xhi - xlo)

    def sy(v):
        return MARGIN["top"] + ph - ph * (v - lo) / (hi - lo)

    out = _frame(title or f"{', '.join(ys)} vs {x}", lo, hi)
    for xv, _ in pts:
        out.append(
            f'<text x="{sx(xv):.1f}" y="{MARGIN["top"] + ph + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{_fmt(xv)}</text>'
        )
    out.append(
        f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{escape(x)}</text>'
    )
    for j, y in enumerate(ys):
        color = PALETTE[j % len(PALETTE)]
        coords = [(sx(xv), sy(vals[j])) for xv, vals in pts if vals[j] is not None]
        path = " ".join(f"{a:.1f},{b:.1f}" for a, b in coords)
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for a, b in coords:
            out.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{color}"/>')
    out += _legend(ys)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(columns, rows, bars: Sequence[str], label: str | None = None, title: str = "") -> str:
    _check(columns, [*bars, *([label] if label else [])])
    label = label or columns[0]
    groups = [(r[label], [_num(r[b]) or 0.0 for b in bars]) for r in rows]
    lo, hi = _range([v for _, vals in groups for v in vals])
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    gw = pw / len(groups)
    bw = gw * 0.8 / len(bars)

    def sy(v):
        return MARGIN["top"] + ph - ph * (v - lo) / (hi - lo)

    out = _frame(title or ", ".join(bars), lo, hi)
    for g, (name, vals) in enumerate(groups):
        gx = MARGIN["left"] + g * gw + gw * 0.1
        for j, v in enumerate(vals):
            top, base = sy(max(v, 0.0)), sy(min(v, 0.0))
            out.append(
                f'<rect x="{gx + j * bw:.1f}" y="{top:.1f}" width="{bw:.1f}" height="{base - top:.1f}" '
                f'fill="{PALETTE[j % len(PALETTE)]}"/>'
            )
        out.append(
            f'<text x="{gx + gw * 0.4:.1f}" y="{MARGIN["top"] + ph + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{escape(name)}</text>'
        )
    out += _legend(bars)
    out.append("</svg>")
    return "\n".join(out) + "\n"
