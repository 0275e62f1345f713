"""Byte-deterministic rendering: SVG line plots, PPM heatmaps, metrics files.

Formats are deliberately minimal: hand-written SVG 1.1, binary PPM (P6,
maxval 255) and RFC-4180 CSV, so every output is a pure function of its
inputs and reproducible byte for byte.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .continual import ScenarioMetrics

PALETTE = ("#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400", "#16a085")

# plot geometry (pixels)
_W, _H = 480, 320
_LEFT, _RIGHT, _TOP, _BOTTOM = 50, 150, 30, 40


@dataclass
class PlotSpec:
    series: dict[str, list[float]]  # label -> one value per block
    title: str = ""
    x_label: str = "conv block"
    y_label: str = "IoU"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def data_to_px(i: int, value: float, k: int) -> tuple[float, float]:
    """Map (block index, value in [0,1]) to SVG pixel coordinates."""
    plot_w = _W - _LEFT - _RIGHT
    plot_h = _H - _TOP - _BOTTOM
    x = _LEFT + (plot_w if k == 1 else i * plot_w / (k - 1))
    y = _TOP + (1.0 - value) * plot_h
    return x, y


def px_to_value(y: float) -> float:
    """Inverse of the y mapping, for coordinate audits."""
    plot_h = _H - _TOP - _BOTTOM
    return 1.0 - (y - _TOP) / plot_h


def render_iou_curves(spec: PlotSpec) -> str:
    """SVG 1.1 document with one polyline per series, y fixed to [0, 1]."""
    lengths = {len(v) for v in spec.series.values()}
    if len(lengths) > 1:
        raise ValueError(f"series lengths differ: {sorted(lengths)}")
    k = lengths.pop() if lengths else 0

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
    ]
    if spec.title:
        parts.append(
            f'<text x="{_W // 2}" y="20" text-anchor="middle" '
            f'font-family="sans-serif" font-size="13">{spec.title}</text>'
        )
    # frame and y gridlines at 0, 0.25, .., 1
    x0, y0 = _LEFT, _TOP
    x1, y1 = _W - _RIGHT, _H - _BOTTOM
    for tick in range(5):
        v = tick / 4
        _, y = data_to_px(0, v, max(k, 2))
        parts.append(
            f'<line x1="{x0}" y1="{_fmt(y)}" x2="{x1}" y2="{_fmt(y)}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x0 - 6}" y="{_fmt(y + 4)}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{v:.2f}</text>'
        )
    parts.append(
        f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" '
        f'fill="none" stroke="black" stroke-width="1"/>'
    )
    for i in range(k):
        x, _ = data_to_px(i, 0.0, k)
        parts.append(
            f'<text x="{_fmt(x)}" y="{y1 + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{i + 1}</text>'
        )
    parts.append(
        f'<text x="{(x0 + x1) // 2}" y="{_H - 8}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11">{spec.x_label}</text>'
    )
    parts.append(
        f'<text x="14" y="{(y0 + y1) // 2}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11" '
        f'transform="rotate(-90 14 {(y0 + y1) // 2})">{spec.y_label}</text>'
    )

    for s, (label, values) in enumerate(spec.series.items()):
        color = PALETTE[s % len(PALETTE)]
        pts = " ".join(
            f"{_fmt(x)},{_fmt(y)}"
            for x, y in (data_to_px(i, float(v), k) for i, v in enumerate(values))
        )
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        ly = y0 + 14 + 16 * s
        parts.append(
            f'<line x1="{x1 + 10}" y1="{ly - 4}" x2="{x1 + 30}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{x1 + 34}" y="{ly}" font-family="sans-serif" '
            f'font-size="10">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_iou_curves(spec: PlotSpec, path) -> Path:
    path = Path(path)
    path.write_text(render_iou_curves(spec))
    return path


def render_heatmap(values: np.ndarray) -> bytes:
    """Binary PPM with a symmetric diverging colormap.

    Positive values fade white -> red, negative white -> blue, scaled by
    max(|v|).  An all-zero map renders all white.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"heatmap input must be 2-D, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("heatmap input has non-finite values")
    h, w = values.shape
    peak = float(np.abs(values).max())
    rgb = np.full((h, w, 3), 255, dtype=np.uint8)
    if peak > 0:
        scaled = values / peak
        fade = np.rint(255 * (1.0 - np.abs(scaled))).astype(np.uint8)
        pos = scaled > 0
        neg = scaled < 0
        rgb[pos] = np.stack(
            [np.full(pos.sum(), 255, np.uint8), fade[pos], fade[pos]], axis=1
        )
        rgb[neg] = np.stack(
            [fade[neg], fade[neg], np.full(neg.sum(), 255, np.uint8)], axis=1
        )
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + rgb.tobytes()


def write_heatmap(values: np.ndarray, path) -> Path:
    path = Path(path)
    path.write_bytes(render_heatmap(values))
    return path


CSV_HEADER = ("strategy", "seed", "task", "phase", "accuracy")


def emit_metrics(metrics: ScenarioMetrics, csv_path, json_path) -> None:
    """Lossless CSV + JSON emission of scenario metrics."""
    csv_path, json_path = Path(csv_path), Path(json_path)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in metrics.rows:
            writer.writerow([r.strategy, r.seed, r.task, r.phase, repr(r.accuracy)])
    doc = {
        "rows": [
            {
                "strategy": r.strategy,
                "seed": r.seed,
                "task": r.task,
                "phase": r.phase,
                "accuracy": r.accuracy,
            }
            for r in metrics.rows
        ],
        "old_task": metrics.old_task,
        "new_task": metrics.new_task,
    }
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def parse_metrics_csv(path) -> list[tuple]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        return [
            (row[0], int(row[1]), int(row[2]), row[3], float(row[4])) for row in reader
        ]
