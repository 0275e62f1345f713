"""Occlusion-based prediction difference analysis.

A sweep slides an occlusion window over the input, replaces its content
with a deterministic baseline (per-channel dataset mean, or fixed gray) and
re-evaluates the network.  For a unit ``a`` (the spatially aggregated
activation of one feature map, or one class logit), every window yields
``delta(w) = a(image) - a(occluded image)``.  The resulting map assigns to
each input pixel the mean delta over all windows covering it, so maps from
every block share the input resolution and can be compared against
segmentation masks.

One sweep performs at most ``len(windows) + 1`` forward passes and serves
all channels of all blocks plus all class logits at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import micronet, tensorio

REPLACEMENTS = ("dataset-mean", "fixed-gray")
AGGREGATIONS = ("spatial-mean", "spatial-max")
BINARIZE_POLICIES = ("positive", "top-quantile")


@dataclass(frozen=True)
class OcclusionConfig:
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
        if self.replacement == "dataset-mean":
            if self.channel_means is None or len(self.channel_means) != in_channels:
                raise ValueError("dataset-mean replacement needs per-channel means")

    def replacement_values(self, in_channels: int) -> np.ndarray:
        if self.replacement == "fixed-gray":
            return np.full(in_channels, 0.5, dtype=np.float64)
        return np.asarray(self.channel_means, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "window": self.window,
            "stride": self.stride,
            "replacement": self.replacement,
            "aggregation": self.aggregation,
            "channel_means": list(self.channel_means) if self.channel_means else None,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "OcclusionConfig":
        means = doc.get("channel_means")
        return cls(
            window=int(doc["window"]),
            stride=int(doc["stride"]),
            replacement=doc["replacement"],
            aggregation=doc["aggregation"],
            channel_means=tuple(means) if means else None,
        )


@dataclass
class ActivationDifferenceMap:
    block: int  # 1-based block index
    map_index: int
    values: np.ndarray  # f32 [input_hw, input_hw], signed
    meta: OcclusionConfig


def window_grid(input_hw: int, window: int, stride: int) -> list[tuple[int, int]]:
    starts = range(0, input_hw - window + 1, stride)
    return [(r, c) for r in starts for c in starts]


@dataclass
class Sweep:
    """All per-window activation deltas of one (model, image) pair."""

    block_deltas: list[np.ndarray]  # block j: [n_windows, channels_j]
    logit_deltas: np.ndarray  # [n_windows, num_classes]
    windows: list[tuple[int, int]]
    input_hw: int
    window: int
    forward_passes: int
    cfg: OcclusionConfig


def _aggregate(maps: np.ndarray, how: str) -> np.ndarray:
    # maps: [n, c, h, w] -> [n, c]
    if how == "spatial-mean":
        return maps.mean(axis=(2, 3))
    return maps.max(axis=(2, 3))


def occlusion_sweep(model: micronet.ModelState, image: np.ndarray, cfg: OcclusionConfig) -> Sweep:
    """Run the full occlusion sweep for one image.

    ``image`` is a float array [in_channels, hw, hw] in [0, 1] (u8 inputs
    are converted).  The sweep is deterministic: windows are evaluated in
    row-major grid order and merged by window index.
    """
    arch = model.arch
    cfg.validate(arch.input_hw, arch.in_channels)
    if image.dtype == np.uint8:
        image = image.astype(model.np_dtype()) / 255.0
    image = image.astype(model.np_dtype(), copy=False)
    want = (arch.in_channels, arch.input_hw, arch.input_hw)
    if image.shape != want:
        raise ValueError(f"image shape {image.shape} does not match {want}")

    windows = window_grid(arch.input_hw, cfg.window, cfg.stride)
    repl = cfg.replacement_values(arch.in_channels).astype(model.np_dtype())

    n_win = len(windows)
    block_deltas = [
        np.zeros((n_win, c), dtype=np.float32) for c in arch.channels
    ]
    logit_deltas = np.zeros((n_win, model.num_classes), dtype=np.float32)

    # Windows whose content already equals the replacement are skipped: their
    # occluded image is byte-identical, so the delta is zero by definition.
    # This makes the zero-occlusion-effect invariant exact regardless of how
    # the BLAS rounds differently sized batches.
    live = [
        (r, c)
        for (r, c) in windows
        if not np.array_equal(
            image[:, r : r + cfg.window, c : c + cfg.window],
            np.broadcast_to(
                repl[:, None, None], (arch.in_channels, cfg.window, cfg.window)
            ),
        )
    ]
    index_of = {w: i for i, w in enumerate(windows)}
    passes = len(live) + 1

    # The unmodified image rides along as row 0 of the first chunk so the
    # reference activations come from the same batched kernel as the windows.
    base_agg = base_logits = None
    done = 0
    while done < len(live) or base_agg is None:
        chunk = live[done : done + (cfg.batch - (1 if base_agg is None else 0))]
        rows = (1 if base_agg is None else 0) + len(chunk)
        batch = np.repeat(image[None], rows, axis=0)
        offset = rows - len(chunk)
        for k, (r, c) in enumerate(chunk):
            batch[offset + k, :, r : r + cfg.window, c : c + cfg.window] = repl[:, None, None]
        aggs, logits = micronet.forward_aggregates(model, batch, cfg.aggregation)
        if base_agg is None:
            base_agg = [a[0] for a in aggs]
            base_logits = logits[0]
        for k, w in enumerate(chunk):
            i = index_of[w]
            for j in range(arch.num_blocks):
                block_deltas[j][i] = (base_agg[j] - aggs[j][offset + k]).astype(np.float32)
            logit_deltas[i] = (base_logits - logits[offset + k]).astype(np.float32)
        done += len(chunk)

    return Sweep(
        block_deltas=block_deltas,
        logit_deltas=logit_deltas,
        windows=windows,
        input_hw=arch.input_hw,
        window=cfg.window,
        forward_passes=passes,
        cfg=cfg,
    )


def _scatter(sweep: Sweep, deltas: np.ndarray) -> np.ndarray:
    """Spread per-window deltas [n_windows, k] onto pixel maps [k, hw, hw]."""
    hw, win = sweep.input_hw, sweep.window
    k = deltas.shape[1]
    acc = np.zeros((k, hw, hw), dtype=np.float64)
    cnt = np.zeros((hw, hw), dtype=np.int64)
    for i, (r, c) in enumerate(sweep.windows):
        acc[:, r : r + win, c : c + win] += deltas[i][:, None, None]
        cnt[r : r + win, c : c + win] += 1
    out = np.divide(acc, np.maximum(cnt, 1)[None], where=cnt[None] > 0)
    out[:, cnt == 0] = 0.0
    return out.astype(np.float32)


def maps_from_sweep(sweep: Sweep, block: int) -> np.ndarray:
    """Pixel maps [channels, hw, hw] for a 1-based block index."""
    if not 1 <= block <= len(sweep.block_deltas):
        raise ValueError(f"block {block} out of range 1..{len(sweep.block_deltas)}")
    return _scatter(sweep, sweep.block_deltas[block - 1])


def activation_difference_map(
    model: micronet.ModelState,
    image: np.ndarray,
    block: int,
    map_index: int,
    cfg: OcclusionConfig,
) -> ActivationDifferenceMap:
    """The signed input-resolution difference map of one feature map."""
    if not 1 <= block <= model.num_blocks:
        raise ValueError(f"block {block} out of range 1..{model.num_blocks}")
    if not 0 <= map_index < model.arch.channels[block - 1]:
        raise ValueError(
            f"map {map_index} out of range for block {block} "
            f"with {model.arch.channels[block - 1]} channels"
        )
    sweep = occlusion_sweep(model, image, cfg)
    values = maps_from_sweep(sweep, block)[map_index]
    return ActivationDifferenceMap(block=block, map_index=map_index, values=values, meta=cfg)


def all_maps(
    model: micronet.ModelState, image: np.ndarray, block: int, cfg: OcclusionConfig
) -> list[ActivationDifferenceMap]:
    """One map per channel of ``block``, in channel order, from one shared sweep."""
    if not 1 <= block <= model.num_blocks:
        raise ValueError(f"block {block} out of range 1..{model.num_blocks}")
    sweep = occlusion_sweep(model, image, cfg)
    stack = maps_from_sweep(sweep, block)
    return [
        ActivationDifferenceMap(block=block, map_index=m, values=stack[m], meta=cfg)
        for m in range(stack.shape[0])
    ]


def prediction_difference(
    model: micronet.ModelState, image: np.ndarray, class_id: int, cfg: OcclusionConfig
) -> ActivationDifferenceMap:
    """Occlusion sweep against the pre-softmax logit of ``class_id``."""
    if not 0 <= class_id < model.num_classes:
        raise ValueError(f"class {class_id} out of range for {model.num_classes} classes")
    sweep = occlusion_sweep(model, image, cfg)
    values = _scatter(sweep, sweep.logit_deltas[:, class_id : class_id + 1])[0]
    return ActivationDifferenceMap(block=0, map_index=class_id, values=values, meta=cfg)


def binarize(fm, policy: str = "positive", q: float | None = None) -> np.ndarray:
    """Binarized evidence mask of a map.

    ``positive`` keeps strictly positive pixels.  ``top-quantile`` keeps the
    ``round(q * n)`` largest pixels, ties broken by value then flat index.
    """
    values = fm.values if isinstance(fm, ActivationDifferenceMap) else np.asarray(fm)
    if policy == "positive":
        return (values > 0).astype(np.uint8)
    if policy == "top-quantile":
        if q is None or not 0 < q <= 1:
            raise ValueError(f"quantile must be in (0, 1], got {q!r}")
        flat = values.reshape(-1)
        k = int(round(q * flat.size))
        order = np.argsort(-flat, kind="stable")
        mask = np.zeros(flat.size, dtype=np.uint8)
        mask[order[:k]] = 1
        return mask.reshape(values.shape)
    raise ValueError(f"unknown binarize policy {policy!r}")


# ---------------------------------------------------------------------------
# interchange export: the same layout the external exporter writes


def export_image_maps(
    root,
    model_name: str,
    image_id: str,
    sweep: Sweep,
    gt: np.ndarray | None = None,
) -> Path:
    """Write one image's per-block maps as an interchange directory.

    Layout: ``<root>/<image_id>/manifest.json`` with tensors named
    ``fm/<model>/<block>/<channel>`` (1-based block, 0-based channel),
    optionally ``gt/<image_id>``, plus ``occlusion.json`` recording the
    sweep configuration.
    """
    out = Path(root) / image_id
    with tensorio.TensorDir(out) as td:
        for j in range(len(sweep.block_deltas)):
            stack = maps_from_sweep(sweep, j + 1)
            for m in range(stack.shape[0]):
                td.write(f"fm/{model_name}/{j + 1}/{m}", stack[m])
        if gt is not None:
            td.write(f"gt/{image_id}", tensorio.validate_mask(gt))
    meta = {"model": model_name, "blocks": len(sweep.block_deltas), "occlusion": sweep.cfg.to_json()}
    (out / "occlusion.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def with_means(cfg: OcclusionConfig, samples) -> OcclusionConfig:
    """Fill in dataset channel means when the replacement needs them."""
    if cfg.replacement != "dataset-mean" or cfg.channel_means is not None:
        return cfg
    from . import shapeworld

    return replace(cfg, channel_means=shapeworld.channel_means(samples))
