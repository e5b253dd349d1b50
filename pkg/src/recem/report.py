"""CSV tables and byte-stable SVG charts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from .metrics import SimilaritySummary

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 56, 120, 28, 44


def fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}"
    return str(v)


@dataclass
class Table:
    name: str
    header: list[str]
    rows: list[list] = field(default_factory=list)


@dataclass
class Curve:
    """Several named series of (x, y) points drawn as one line chart."""

    name: str
    series: dict[str, dict[float, float]]
    xlabel: str = "x"
    ylabel: str = "y"

    @property
    def empty(self) -> bool:
        return not any(self.series.values())


@dataclass
class Histogram:
    name: str
    summaries: dict[str, SimilaritySummary]


@dataclass
class ExperimentResult:
    tables: list[Table] = field(default_factory=list)
    curves: list[Curve] = field(default_factory=list)
    histograms: list[Histogram] = field(default_factory=list)
    header: dict[str, str] = field(default_factory=dict)


def csv_text(header: list[str], rows: list[list]) -> str:
    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def curve_rows(curve: Curve) -> tuple[list[str], list[list]]:
    rows = [[name, x, y] for name, pts in curve.series.items() for x, y in sorted(pts.items())]
    return ["series", curve.xlabel, curve.ylabel], rows


def histogram_rows(hist: Histogram) -> tuple[list[str], list[list]]:
    header = ["bin_low", "bin_high", "count"]
    if len(hist.summaries) == 1:
        (s,) = hist.summaries.values()
        return header, [list(r) for r in s.histogram_rows()]
    return ["series"] + header, [[name, *r] for name, s in hist.summaries.items() for r in s.histogram_rows()]


# -- SVG -----------------------------------------------------------------------------


def _svg(body: list[str], title: str) -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W // 2}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">'
            f'{escape(title)}</text>']
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _axes(xlo, xhi, ylo, yhi, xlabel, ylabel) -> tuple[list[str], callable, callable]:
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    xs = (lambda v: LEFT + (v - xlo) / (xhi - xlo) * pw) if xhi > xlo else (lambda v: LEFT + pw / 2)
    ys = (lambda v: TOP + ph - (v - ylo) / (yhi - ylo) * ph) if yhi > ylo else (lambda v: TOP + ph / 2)
    out = [f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>']
    for i in range(5):
        xv, yv = xlo + (xhi - xlo) * i / 4, ylo + (yhi - ylo) * i / 4
        out.append(f'<text x="{xs(xv):.2f}" y="{TOP + ph + 14}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{xv:.3g}</text>')
        out.append(f'<text x="{LEFT - 4}" y="{ys(yv) + 3:.2f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{yv:.3g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{H - 8}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="11">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{TOP + ph / 2:.2f}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="11" transform="rotate(-90 14 {TOP + ph / 2:.2f})">{escape(ylabel)}</text>')
    return out, xs, ys


def _legend(names: list[str]) -> list[str]:
    out = []
    for i, name in enumerate(names):
        y = TOP + 12 + 16 * i
        col = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{W - RIGHT + 10}" y="{y - 8}" width="10" height="10" fill="{col}"/>')
        out.append(f'<text x="{W - RIGHT + 24}" y="{y}" font-family="sans-serif" font-size="10">'
                   f'{escape(name)}</text>')
    return out


def line_chart(curve: Curve) -> str:
    pts = [(x, y) for s in curve.series.values() for x, y in s.items()]
    xlo, xhi = min(p[0] for p in pts), max(p[0] for p in pts)
    ylo, yhi = min(p[1] for p in pts), max(p[1] for p in pts)
    pad = 0.05 * (yhi - ylo) or 1.0
    body, xs, ys = _axes(xlo, xhi, ylo - pad, yhi + pad, curve.xlabel, curve.ylabel)
    for i, (name, s) in enumerate(curve.series.items()):
        col = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{xs(x):.2f},{ys(y):.2f}" for x, y in sorted(s.items()))
        body.append(f'<polyline points="{coords}" fill="none" stroke="{col}" stroke-width="2"/>')
        body += [f'<circle cx="{xs(x):.2f}" cy="{ys(y):.2f}" r="3" fill="{col}"/>' for x, y in sorted(s.items())]
    return _svg(body + _legend(list(curve.series)), curve.name)


def histogram_chart(hist: Histogram) -> str:
    summaries = list(hist.summaries.items())
    edges = summaries[0][1].edges
    top = max(max(int(s.counts.max()), 1) for _, s in summaries)
    body, xs, ys = _axes(float(edges[0]), float(edges[-1]), 0.0, float(top), "cosine similarity", "count")
    n = len(summaries)
    for i, (_, s) in enumerate(summaries):
        col = PALETTE[i % len(PALETTE)]
        for b, c in enumerate(s.counts):
            x0, x1 = xs(float(s.edges[b])), xs(float(s.edges[b + 1]))
            w = (x1 - x0) / n
            body.append(f'<rect x="{x0 + i * w:.2f}" y="{ys(float(c)):.2f}" width="{w:.2f}" '
                        f'height="{ys(0.0) - ys(float(c)):.2f}" fill="{col}" fill-opacity="0.8"/>')
    return _svg(body + _legend([name for name, _ in summaries]), hist.name)


def emit_report(result: ExperimentResult, out_dir: str | Path) -> list[Path]:
    """Write every table, curve and histogram; returns the written paths in a stable order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def put(name: str, text: str) -> None:
        path = out / name
        path.write_text(text, encoding="utf-8", newline="\n")
        written.append(path)

    if result.header:
        put("run_header.txt", "".join(f"{k} = {v}\n" for k, v in result.header.items()))
    for t in result.tables:
        put(f"{t.name}.csv", csv_text(t.header, t.rows))
    for c in result.curves:
        put(f"{c.name}.csv", csv_text(*curve_rows(c)))
        if not c.empty:
            put(f"{c.name}.svg", line_chart(c))
    for h in result.histograms:
        put(f"{h.name}.csv", csv_text(*histogram_rows(h)))
        if h.summaries:
            put(f"{h.name}.svg", histogram_chart(h))
    return written
