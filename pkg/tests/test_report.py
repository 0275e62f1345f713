import csv
import json
import re

import numpy as np
import pytest

from convdissect import report
from convdissect.continual import MetricRow, ScenarioMetrics
from convdissect.report import PlotSpec


def test_single_series_has_one_polyline():
    svg = report.render_iou_curves(PlotSpec(series={"a": [0.9, 0.7, 0.4, 0.3]}))
    assert svg.count("<polyline") == 1
    assert svg.startswith('<?xml version="1.0"')
    assert 'version="1.1"' in svg


def test_svg_is_byte_deterministic(tmp_path):
    spec = PlotSpec(series={"x": [0.5, 0.4, 0.3, 0.2], "y": [1.0, 0.9, 0.8, 0.1]})
    a = report.plot_iou_curves(spec, tmp_path / "a.svg").read_bytes()
    b = report.plot_iou_curves(spec, tmp_path / "b.svg").read_bytes()
    assert a == b


def test_series_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        report.render_iou_curves(PlotSpec(series={"a": [0.1, 0.2], "b": [0.1]}))


def test_polyline_coordinates_invert_to_values():
    values = [0.83, 0.61, 0.37, 0.30]
    svg = report.render_iou_curves(PlotSpec(series={"s": values}))
    poly = re.search(r'<polyline points="([^"]+)"', svg).group(1)
    ys = [float(pt.split(",")[1]) for pt in poly.split()]
    # 0.5 px corresponds to 0.5/250 in value space
    for y, v in zip(ys, values):
        assert abs(report.px_to_value(y) - v) < 0.5 / 250
    for y, v in zip(ys, values):
        y_round = float(f"{y:.2f}")
        assert abs(y_round - (report.data_to_px(0, v, 1)[1])) < 0.51


def test_heatmap_all_zero_is_white():
    ppm = report.render_heatmap(np.zeros((4, 4), np.float32))
    assert ppm.startswith(b"P6\n4 4\n255\n")
    pixels = ppm.split(b"255\n", 1)[1]
    assert pixels == b"\xff" * (4 * 4 * 3)


def test_heatmap_single_positive_pixel_pure_red():
    values = np.zeros((3, 3), np.float32)
    values[1, 2] = 2.5
    ppm = report.render_heatmap(values)
    pixels = np.frombuffer(ppm.split(b"255\n", 1)[1], np.uint8).reshape(3, 3, 3)
    assert pixels[1, 2].tolist() == [255, 0, 0]
    others = np.delete(pixels.reshape(-1, 3), 1 * 3 + 2, axis=0)
    assert (others == 255).all()


def test_heatmap_negation_swaps_red_blue():
    rng = np.random.default_rng(0)
    values = rng.standard_normal((8, 8)).astype(np.float32)
    a = np.frombuffer(report.render_heatmap(values).split(b"255\n", 1)[1], np.uint8)
    b = np.frombuffer(report.render_heatmap(-values).split(b"255\n", 1)[1], np.uint8)
    a = a.reshape(-1, 3)
    b = b.reshape(-1, 3)
    assert np.array_equal(a[:, 0], b[:, 2])
    assert np.array_equal(a[:, 2], b[:, 0])
    assert np.array_equal(a[:, 1], b[:, 1])


def test_heatmap_rejects_non_finite():
    bad = np.array([[np.nan, 0.0]], np.float32)
    with pytest.raises(ValueError, match="finite"):
        report.render_heatmap(bad)


def _metrics(strategies=("a", "b"), seeds=(1, 2), tasks=(0, 1), phases=("p0", "p1")):
    rows = [
        MetricRow(s, sd, t, ph, 0.25)
        for s in strategies
        for sd in seeds
        for t in tasks
        for ph in phases
    ]
    return ScenarioMetrics(rows=rows, old_task={"a": 0.5}, new_task={"a": 0.75})


def test_emit_metrics_header_and_roundtrip(tmp_path):
    metrics = _metrics()
    report.emit_metrics(metrics, tmp_path / "m.csv", tmp_path / "m.json")
    with (tmp_path / "m.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == report.CSV_HEADER
    parsed = report.parse_metrics_csv(tmp_path / "m.csv")
    assert parsed == [(r.strategy, r.seed, r.task, r.phase, r.accuracy) for r in metrics.rows]
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["old_task"] == {"a": 0.5}
    assert len(doc["rows"]) == len(metrics.rows)


def test_emit_metrics_combinatorial_row_count(tmp_path):
    strategies, seeds, tasks, phases = ("a", "b", "c"), (1, 2), (0, 1, 2), ("x", "y")
    metrics = _metrics(strategies, seeds, tasks, phases)
    report.emit_metrics(metrics, tmp_path / "m.csv", tmp_path / "m.json")
    parsed = report.parse_metrics_csv(tmp_path / "m.csv")
    assert len(parsed) == len(strategies) * len(seeds) * len(tasks) * len(phases)


def test_emit_metrics_accuracy_roundtrip_is_exact(tmp_path):
    rows = [MetricRow("s", 1, 0, "p", 1 / 3), MetricRow("s", 1, 1, "p", 0.1 + 0.2)]
    metrics = ScenarioMetrics(rows=rows, old_task={}, new_task={})
    report.emit_metrics(metrics, tmp_path / "m.csv", tmp_path / "m.json")
    parsed = report.parse_metrics_csv(tmp_path / "m.csv")
    assert parsed[0][4] == 1 / 3 and parsed[1][4] == 0.1 + 0.2
