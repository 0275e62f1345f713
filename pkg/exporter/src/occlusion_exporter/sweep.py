"""Batched occlusion sweeps inside torch, exported as interchange maps.

The sweep semantics mirror the analyzer exactly: a window grid with fixed
stride, deterministic replacement content (per-channel dataset mean or
fixed gray), per-feature-map spatial aggregation, and per-pixel averaging
of the per-window activation differences over all windows covering the
pixel.  Windows whose content already equals the replacement are skipped,
so the zero-occlusion-effect case is exactly zero.

Output layout per image: ``<out>/<image_id>/manifest.json`` with tensors
``fm/<model>/<block>/<channel>`` (1-based block, 0-based channel) and
``gt/<image_id>``, plus ``occlusion.json`` recording the configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import interchange

REPLACEMENTS = ("dataset-mean", "fixed-gray")
AGGREGATIONS = ("spatial-mean", "spatial-max")


@dataclass(frozen=True)
class OcclusionSpec:
    window: int = 8
    stride: int = 4
    replacement: str = "dataset-mean"
    aggregation: str = "spatial-mean"
    channel_means: tuple[float, ...] | None = None
    batch: int = 64

    def validate(self, input_hw: int, in_channels: int) -> None:
        if not 1 <= self.stride <= self.window:
            raise ValueError(f"need window >= stride >= 1, got {self.window}/{self.stride}")
        if self.window > input_hw:
            raise ValueError(f"window {self.window} exceeds input side {input_hw}")
        if self.replacement not in REPLACEMENTS:
            raise ValueError(f"unknown replacement {self.replacement!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.replacement == "dataset-mean" and (
            self.channel_means is None or len(self.channel_means) != in_channels
        ):
            raise ValueError("dataset-mean replacement needs per-channel means")

    def replacement_values(self, in_channels: int) -> np.ndarray:
        if self.replacement == "fixed-gray":
            return np.full(in_channels, 0.5, dtype=np.float32)
        return np.asarray(self.channel_means, dtype=np.float32)

    def to_json(self) -> dict:
        return {
            "window": self.window,
            "stride": self.stride,
            "replacement": self.replacement,
            "aggregation": self.aggregation,
            "channel_means": list(self.channel_means) if self.channel_means else None,
        }


@dataclass
class ExportItem:
    image_id: str
    image: np.ndarray  # u8 or float [channels, hw, hw]
    mask: np.ndarray | None = None  # u8 [hw, hw]


@dataclass
class ExportJob:
    model: torch.nn.Module
    block_layers: list[str]  # ordered module names standing in for conv blocks
    items: list[ExportItem]
    occlusion: OcclusionSpec
    out_dir: Path
    model_name: str = "model"


@dataclass
class ExportResult:
    written: list[str] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)


def _resolve_layers(model: torch.nn.Module, names: list[str]) -> list[torch.nn.Module]:
    if not names:
        raise ValueError("block-to-layer mapping must not be empty")
    try:
        return [model.get_submodule(n) for n in names]
    except AttributeError as e:
        raise ValueError(f"unresolvable layer name: {e}") from e


def _window_grid(hw: int, window: int, stride: int) -> list[tuple[int, int]]:
    starts = range(0, hw - window + 1, stride)
    return [(r, c) for r in starts for c in starts]


class _Capture:
    """Forward hooks capturing spatially aggregated activations per layer."""

    def __init__(self, layers: list[torch.nn.Module], how: str):
        self.how = how
        self.values: list[torch.Tensor] = [None] * len(layers)
        self.handles = [
            layer.register_forward_hook(self._hook(i)) for i, layer in enumerate(layers)
        ]

    def _hook(self, i: int):
        def fn(module, args, output):
            agg = output.mean(dim=(2, 3)) if self.how == "spatial-mean" else output.amax(dim=(2, 3))
            self.values[i] = agg.detach()

        return fn

    def remove(self):
        for h in self.handles:
            h.remove()


def _sweep_one(model, layers, image: np.ndarray, spec: OcclusionSpec):
    """Per-window aggregated deltas for every mapped layer; returns
    (deltas per layer [n_windows, channels], windows)."""
    channels_in, hw, _ = image.shape
    windows = _window_grid(hw, spec.window, spec.stride)
    repl = spec.replacement_values(channels_in)

    patch = np.broadcast_to(
        repl[:, None, None], (channels_in, spec.window, spec.window)
    ).astype(np.float32)
    live = [
        (r, c)
        for (r, c) in windows
        if not np.array_equal(image[:, r : r + spec.window, c : c + spec.window], patch)
    ]

    capture = _Capture(layers, spec.aggregation)
    try:
        base_agg = None
        deltas = {}
        done = 0
        while done < len(live) or base_agg is None:
            room = spec.batch - (1 if base_agg is None else 0)
            chunk = live[done : done + room]
            rows = (1 if base_agg is None else 0) + len(chunk)
            batch = np.repeat(image[None], rows, axis=0)
            offset = rows - len(chunk)
            for k, (r, c) in enumerate(chunk):
                batch[offset + k, :, r : r + spec.window, c : c + spec.window] = patch
            with torch.no_grad():
                model(torch.from_numpy(batch))
            aggs = [v.numpy() for v in capture.values]
            if base_agg is None:
                base_agg = [a[0] for a in aggs]
            for k, w in enumerate(chunk):
                deltas[w] = [base_agg[i] - aggs[i][offset + k] for i in range(len(layers))]
            done += len(chunk)
    finally:
        capture.remove()

    n_win = len(windows)
    out = [np.zeros((n_win, base_agg[i].shape[0]), np.float32) for i in range(len(layers))]
    for w_idx, w in enumerate(windows):
        if w in deltas:
            for i in range(len(layers)):
                out[i][w_idx] = deltas[w][i]
    return out, windows


def _scatter(deltas: np.ndarray, windows, hw: int, window: int) -> np.ndarray:
    acc = np.zeros((deltas.shape[1], hw, hw), np.float64)
    cnt = np.zeros((hw, hw), np.int64)
    for i, (r, c) in enumerate(windows):
        acc[:, r : r + window, c : c + window] += deltas[i][:, None, None]
        cnt[r : r + window, c : c + window] += 1
    out = np.divide(acc, np.maximum(cnt, 1)[None], where=cnt[None] > 0)
    out[:, cnt == 0] = 0.0
    return out.astype(np.float32)


def to_float_image(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32, copy=False)


def export_maps(job: ExportJob) -> ExportResult:
    """Run the sweep for every item and write per-image interchange dirs.

    Per-item failures (shape mismatch, bad masks) are recorded and skipped;
    the job continues with the remaining items.
    """
    layers = _resolve_layers(job.model, job.block_layers)
    result = ExportResult()
    out_root = Path(job.out_dir)
    for item in job.items:
        try:
            image = to_float_image(np.asarray(item.image))
            if image.ndim != 3 or image.shape[1] != image.shape[2]:
                raise ValueError(f"image must be square [c, hw, hw], got {image.shape}")
            job.occlusion.validate(image.shape[1], image.shape[0])
            deltas, windows = _sweep_one(job.model, layers, image, job.occlusion)
            tensors: dict[str, np.ndarray] = {}
            for i in range(len(layers)):
                maps = _scatter(deltas[i], windows, image.shape[1], job.occlusion.window)
                for ch in range(maps.shape[0]):
                    tensors[f"fm/{job.model_name}/{i + 1}/{ch}"] = maps[ch]
            if item.mask is not None:
                mask = np.asarray(item.mask).astype(np.uint8)
                if mask.shape != image.shape[1:]:
                    raise ValueError(f"mask shape {mask.shape} does not match image")
                tensors[f"gt/{item.image_id}"] = mask
            out = interchange.write_dir(out_root / item.image_id, tensors)
            meta = {
                "model": job.model_name,
                "blocks": len(layers),
                "occlusion": job.occlusion.to_json(),
            }
            (out / "occlusion.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
            result.written.append(item.image_id)
        except ValueError as e:
            result.errors.append((item.image_id, str(e)))
    return result
