"""
Plot-data emission: long-format CSV and a self-contained SVG line chart.
"""

import csv
import io
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional
from xml.sax.saxutils import escape

import structlog

from .models import MetricsRecord
from .utils import normalize_min_max

logger = structlog.get_logger()

Series = Mapping[str, Mapping[float, float]]

FORMATS = ("csv", "svg")
WIDTH, HEIGHT = 640, 360
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 60, 150, 40, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _fmt(value: float) -> str:
    return format(float(value), '.10g')


def render_csv(series: Series) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["x", "series_name", "value"])
    for name, points in series.items():
        for x in sorted(points):
            writer.writerow([_fmt(x), name, _fmt(points[x])])
    return buffer.getvalue()


def render_svg(series: Series, title: str = "", x_label: str = "x", y_label: str = "value") -> str:
    """Line chart with axes, min/max tick labels, a legend and a title."""
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    x0, y0 = MARGIN_LEFT, MARGIN_TOP + plot_h

    xs = [float(x) for points in series.values() for x in points]
    ys = [float(v) for points in series.values() for v in points.values()]
    x_norm = dict(zip(xs, normalize_min_max(xs))) if xs else {}
    y_norm = normalize_min_max(ys)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}" stroke="black"/>',
        f'<text x="{x0 + plot_w / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x_label)}</text>',
        f'<text x="14" y="{MARGIN_TOP + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {MARGIN_TOP + plot_h / 2:.1f})">{escape(y_label)}</text>',
    ]
    if xs:
        parts.append(f'<text x="{x0}" y="{y0 + 16}" text-anchor="middle">{_fmt(min(xs))}</text>')
        parts.append(f'<text x="{x0 + plot_w}" y="{y0 + 16}" text-anchor="middle">{_fmt(max(xs))}</text>')
        parts.append(f'<text x="{x0 - 6}" y="{y0}" text-anchor="end">{_fmt(min(ys))}</text>')
        parts.append(f'<text x="{x0 - 6}" y="{MARGIN_TOP + 4}" text-anchor="end">{_fmt(max(ys))}</text>')

    offset = 0
    for index, (name, points) in enumerate(series.items()):
        color = PALETTE[index % len(PALETTE)]
        ordered = sorted(points)
        # y_norm follows the insertion order of points, not the sorted order
        norm_by_x = {x: y_norm[offset + i] for i, x in enumerate(points)}
        offset += len(points)
        coords = [(x0 + x_norm[float(x)] * plot_w, y0 - norm_by_x[x] * plot_h) for x in ordered]
        if len(coords) == 1:
            cx, cy = coords[0]
            parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="3" fill="{color}"/>')
        elif coords:
            path = " ".join(f"{cx:.1f},{cy:.1f}" for cx, cy in coords)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        legend_y = MARGIN_TOP + 14 * index + 6
        legend_x = WIDTH - MARGIN_RIGHT + 12
        parts.append(f'<line x1="{legend_x}" y1="{legend_y}" x2="{legend_x + 16}" y2="{legend_y}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{legend_x + 22}" y="{legend_y + 4}">{escape(name)}</text>')
    parts.append('</svg>')
    return "\n".join(parts) + "\n"


def emit_plot_data(series: Series, out_path, fmt: str = "csv", title: str = "",
                   x_label: str = "epoch", y_label: str = "value") -> Path:
    """
    Write series to out_path as CSV (header x,series_name,value) or SVG.
    Identical input always produces identical bytes.
    """
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got '{fmt}'")
    text = render_csv(series) if fmt == "csv" else render_svg(series, title, x_label, y_label)
    out_path = Path(out_path)
    out_path.write_text(text, encoding='utf-8')
    logger.debug("plot_data_written", path=str(out_path), fmt=fmt, series=len(series))
    return out_path


def metrics_series(records: Iterable[MetricsRecord]) -> Dict[str, Dict[float, float]]:
    """Loss and accuracy curves from metrics records, keyed by step (train) or epoch (val)."""
    series: Dict[str, Dict[float, float]] = {'train_total': {}, 'train_task': {}, 'train_accuracy': {}}
    val: Dict[float, float] = {}
    for record in records:
        series['train_total'][record.step] = record.total
        series['train_task'][record.step] = record.task
        series['train_accuracy'][record.step] = record.train_accuracy
        if record.val_accuracy is not None:
            val[record.epoch] = record.val_accuracy
    if val:
        series['val_accuracy'] = val
    return series


def merge_series(*groups: Optional[Series]) -> Dict[str, Dict[float, float]]:
    merged: Dict[str, Dict[float, float]] = {}
    for group in groups:
        for name, points in (group or {}).items():
            merged[name] = dict(points)
    return merged
