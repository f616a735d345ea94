"""Minimal static SVG line charts plus the long-format CSV table behind each figure."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

FIGURES = ("stability", "classes", "gradient", "entry", "curvature", "cusp")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
           "#7f7f7f", "#17becf", "#bcbd22")
TABLE_COLUMNS = ("cell", "series", "iteration", "t", "value")


class PlotError(ValueError):
    pass


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    dotted: bool = False
    color: str | None = None


@dataclass
class Figure:
    title: str
    xlabel: str
    ylabel: str
    series: list[Series] = field(default_factory=list)
    log_y: bool = False
    x_range: tuple[float, float] | None = None


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def render_svg(fig: Figure, width: int = 640, height: int = 400) -> str:
    """Render ``fig``; on a log axis nonpositive points are dropped."""
    pts = []
    for s in fig.series:
        if len(s.x) != len(s.y):
            raise PlotError(f"series {s.label!r}: x and y lengths differ")
        keep = [(float(a), float(b)) for a, b in zip(s.x, s.y)
                if math.isfinite(a) and math.isfinite(b) and (b > 0 or not fig.log_y)]
        pts.append(keep)
    if not any(pts):
        raise PlotError(f"figure {fig.title!r} has no plottable points")
    fy = (lambda v: math.log10(v)) if fig.log_y else (lambda v: v)
    xs = [p[0] for ps in pts for p in ps]
    ys = [fy(p[1]) for ps in pts for p in ps]
    x0, x1 = fig.x_range if fig.x_range else (min(xs), max(xs))
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    ml, mr, mt, mb = 70, 150, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + ph - (fy(v) - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml + pw / 2}" y="18" text-anchor="middle" font-size="13">'
           f'{escape(fig.title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for v in _ticks(x0, x1):
        x = px(v)
        out.append(f'<line x1="{x:.2f}" y1="{mt + ph}" x2="{x:.2f}" y2="{mt + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{mt + ph + 16}" text-anchor="middle">{_fmt(v)}</text>')
    for v in _ticks(y0, y1):
        y = mt + ph - (v - y0) / (y1 - y0) * ph
        label = _fmt(10 ** v) if fig.log_y else _fmt(v)
        out.append(f'<line x1="{ml - 4}" y1="{y:.2f}" x2="{ml}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 6}" y="{y + 4:.2f}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">'
               f'{escape(fig.xlabel)}</text>')
    ylab = fig.ylabel + (" (log)" if fig.log_y else "")
    out.append(f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2})">{escape(ylab)}</text>')
    for i, (s, ps) in enumerate(zip(fig.series, pts)):
        color = s.color or PALETTE[i % len(PALETTE)]
        dash = ' stroke-dasharray="2,3"' if s.dotted else ""
        if ps:
            coords = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in ps)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                       f'stroke-width="1.5"{dash}/>')
        ly = mt + 12 + 14 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="1.5"{dash}/>')
        out.append(f'<text x="{ml + pw + 34}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_table(rows: Sequence[dict], path, columns: Sequence[str] = TABLE_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _group(rows: Sequence[dict]) -> dict[tuple[str, str], list[dict]]:
    groups: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        groups.setdefault((row["cell"], row["series"]), []).append(row)
    return groups


def figure_from_rows(which: str, rows: Sequence[dict], dotted: Sequence[str] = (),
                     x: str = "iteration") -> Figure:
    """Build one of the standard figures from long-format rows."""
    if which not in FIGURES:
        raise PlotError(f"unknown figure {which!r}; choose from {', '.join(FIGURES)}")
    if not rows:
        raise PlotError(f"figure {which!r}: no telemetry rows")
    titles = {
        "stability": ("Stability ratios: last top (solid) vs first bulk (dotted)", "rho", True),
        "classes": ("Stability ratios by class count", "rho", True),
        "gradient": ("Gradient norm in top (solid) and bulk (dotted) subspaces", "norm", True),
        "entry": ("Entry into the edge of stability", "value", True),
        "curvature": ("Top curvature under gradient flow", "lambda_1", False),
        "cusp": ("Loss change along top eigenvector", "delta loss", False),
    }
    title, ylabel, log_y = titles[which]
    fig = Figure(title, "t" if x == "t" else "iteration", ylabel, log_y=log_y)
    cells = list(dict.fromkeys(r["cell"] for r in rows))
    for (cell, name), grp in _group(rows).items():
        color = PALETTE[cells.index(cell) % len(PALETTE)]
        fig.series.append(Series(f"{cell} {name}", [g[x] for g in grp], [g["value"] for g in grp],
                                 dotted=name in dotted, color=color))
    return fig


def emit_figure(which: str, rows: Sequence[dict], out_dir, dotted: Sequence[str] = (),
                x: str = "iteration") -> tuple[Path, Path]:
    """Write ``<which>.svg`` and ``<which>.csv`` into ``out_dir``."""
    fig = figure_from_rows(which, rows, dotted, x)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    svg, table = out_dir / f"{which}.svg", out_dir / f"{which}.csv"
    svg.write_text(render_svg(fig))
    write_table(rows, table)
    return svg, table


def emit_cusp(deltas, values, out_dir, half_width: float = 0.003) -> tuple[Path, Path]:
    if len(deltas) == 0:
        raise PlotError("figure 'cusp': empty profile")
    fig = Figure("Loss change along top eigenvector", "delta", "delta loss",
                 [Series("profile", list(deltas), list(values))],
                 x_range=(-half_width, half_width))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    svg, table = out_dir / "cusp.svg", out_dir / "cusp.csv"
    svg.write_text(render_svg(fig))
    write_table([{"delta": float(d), "value": float(v)} for d, v in zip(deltas, values)], table,
                columns=("delta", "value"))
    return svg, table
