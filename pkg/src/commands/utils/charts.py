from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from jinja2 import Environment, FileSystemLoader, select_autoescape

# SVG charts rendered from jinja2 templates, the way HTML feedback pages are rendered elsewhere
environment = Environment(
    loader=FileSystemLoader(Path(__file__).parent / 'templates'),
    autoescape=select_autoescape(['svg.j2']),
    trim_blocks=True,
    lstrip_blocks=True
)

PALETTE = ('#1f77b4', '#d62728', '#2ca02c', '#ff7f0e', '#9467bd', '#8c564b', '#e377c2', '#7f7f7f', '#17becf')
WIDTH, HEIGHT = 720, 400


@dataclass
class PlotArea:
    left: float = 64
    right: float = WIDTH - 170
    top: float = 32
    bottom: float = HEIGHT - 40


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def _scale(value: float, lo: float, hi: float, start: float, end: float) -> float:
    if hi == lo:
        return (start + end) / 2
    return start + (value - lo) / (hi - lo) * (end - start)


def line_chart(series: dict[str, list[tuple[float, float]]], title: str, x_label: str, y_label: str) -> str:
    """
    Renders one polyline per named series

    Parameters
    ----------
    series (dict[str, list[tuple[float, float]]]): name -> (x, y) points. Non-finite points are dropped
    title (str): Chart title
    x_label (str): x axis label
    y_label (str): y axis label

    Returns
    ----------
    str: The SVG document
    """

    plot = PlotArea()
    points = {name: [(x, y) for x, y in values if math.isfinite(x) and math.isfinite(y)]
              for name, values in series.items()}
    xs = [x for values in points.values() for x, _ in values] or [0.0]
    ys = [y for values in points.values() for _, y in values] or [0.0]
    x_lo, x_hi, y_lo, y_hi = min(xs), max(xs), min(ys), max(ys)

    lines = []
    for i, (name, values) in enumerate(points.items()):
        coordinates = ' '.join(
            f'{_scale(x, x_lo, x_hi, plot.left, plot.right):.2f},{_scale(y, y_lo, y_hi, plot.bottom, plot.top):.2f}'
            for x, y in values
        )
        lines.append({'name': name, 'color': PALETTE[i % len(PALETTE)], 'points': coordinates})

    return environment.get_template('line_chart.svg.j2').render(
        width=WIDTH,
        height=HEIGHT,
        title=title,
        x_label=x_label,
        y_label=y_label,
        plot=plot,
        lines=lines,
        x_ticks=[{'pos': _scale(x, x_lo, x_hi, plot.left, plot.right), 'label': f'{x:g}'} for x in _ticks(x_lo, x_hi)],
        y_ticks=[{'pos': _scale(y, y_lo, y_hi, plot.bottom, plot.top), 'label': f'{y:.3g}'} for y in _ticks(y_lo, y_hi)]
    )


def bar_chart(groups: dict[str, list[int]], edges: list[float], title: str, x_label: str, y_label: str) -> str:
    """
    Renders overlaid histograms sharing the same bin edges

    Parameters
    ----------
    groups (dict[str, list[int]]): name -> counts, one per bin
    edges (list[float]): Bin edges, one more than the counts
    """

    plot = PlotArea()
    top = max((count for counts in groups.values() for count in counts), default=0) or 1
    lo, hi = edges[0], edges[-1]

    rendered = []
    for i, (name, counts) in enumerate(groups.items()):
        bars = []
        for left, right, count in zip(edges[:-1], edges[1:], counts):
            x0 = _scale(left, lo, hi, plot.left, plot.right)
            x1 = _scale(right, lo, hi, plot.left, plot.right)
            y = _scale(count, 0, top, plot.bottom, plot.top)
            bars.append({'x': f'{x0:.2f}', 'y': f'{y:.2f}', 'width': f'{max(x1 - x0 - 1, 0.5):.2f}',
                         'height': f'{plot.bottom - y:.2f}'})
        rendered.append({'name': name, 'color': PALETTE[i % len(PALETTE)], 'bars': bars})

    return environment.get_template('bar_chart.svg.j2').render(
        width=WIDTH,
        height=HEIGHT,
        title=title,
        x_label=x_label,
        y_label=y_label,
        plot=plot,
        groups=rendered,
        x_ticks=[{'pos': _scale(x, lo, hi, plot.left, plot.right), 'label': f'{x:.2g}'} for x in _ticks(lo, hi)],
        y_ticks=[{'pos': _scale(y, 0, top, plot.bottom, plot.top), 'label': f'{y:.0f}'} for y in _ticks(0, top)]
    )


def write_svg(path: str | Path, svg: str) -> Path:
    path = Path(path)
    path.write_text(svg, encoding='utf8')
    return path
