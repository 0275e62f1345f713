"""Dissect which conv block forgets, by comparing binarized evidence maps.

For each probe image the old model's per-block representative map is the
channel whose binarized evidence best overlaps the ground-truth mask; the
new model's representative is the channel that best overlaps the old
representative.  The per-block best IoU values form a curve; the block with
the largest consecutive drop (with a virtual predecessor of 1.0 ahead of
block 1) is that image's weakest block, and the modal weakest block across
the probe set is the aggregate forgetting block.

Both live models and pre-exported interchange map directories can act as
map sources, so the analysis also runs on maps produced by external
frameworks.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import micronet, pda, tensorio


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two equal-size binary masks.

    Returns 0.0 when either mask is empty: an empty evidence mask carries
    no information, so it can never be a representative.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a != 0
    b = b != 0
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    inter = int(np.logical_and(a, b).sum())
    if inter == 0:
        return 0.0
    return inter / union


def representative_map(
    maps, ref: np.ndarray, policy: str = "positive", q: float | None = None
) -> tuple[int, float]:
    """Index and IoU of the map whose binarized evidence best matches ``ref``.

    ``maps`` is a sequence of ActivationDifferenceMaps or raw 2-D arrays.
    Ties break toward the lowest index.
    """
    if len(maps) == 0:
        raise ValueError("cannot pick a representative from an empty map list")
    best_idx, best_iou = 0, -1.0
    for m, fm in enumerate(maps):
        value = iou(pda.binarize(fm, policy, q), ref)
        if value > best_iou:
            best_idx, best_iou = m, value
    return best_idx, best_iou


@dataclass
class IoUCurve:
    ious: list[float]  # index j-1 holds block j's best new-vs-old IoU
    rm_old: list[int]  # representative channel of the old model per block
    rm_new: list[int]  # representative channel of the new model per block


def detect_drop(curve) -> int:
    """1-based block with the largest consecutive IoU drop.

    Block 1 competes through a virtual predecessor of 1.0, so a degraded
    first block is selectable.  Ties break toward the earliest block.
    """
    ious = curve.ious if isinstance(curve, IoUCurve) else list(curve)
    if len(ious) < 2:
        raise ValueError("curve needs at least 2 blocks")
    prev = [1.0] + list(ious[:-1])
    drops = [p - v for p, v in zip(prev, ious)]
    best = 0
    for j in range(1, len(drops)):
        if drops[j] > drops[best]:
            best = j
    return best + 1


# ---------------------------------------------------------------------------
# map sources


class ModelMaps:
    """Live map source: sweeps a model on demand, cached per image id."""

    def __init__(self, model: micronet.ModelState, cfg: pda.OcclusionConfig):
        self.model = model
        self.cfg = cfg
        self._cache: dict[str, pda.Sweep] = {}

    @property
    def num_blocks(self) -> int:
        return self.model.num_blocks

    def maps(self, image_id: str, image: np.ndarray | None, block: int) -> np.ndarray:
        if image_id not in self._cache:
            if image is None:
                raise ValueError(f"live source needs pixels for image {image_id!r}")
            self._cache[image_id] = pda.occlusion_sweep(self.model, image, self.cfg)
        return pda.maps_from_sweep(self._cache[image_id], block)


class DirectoryMaps:
    """Map source backed by per-image interchange directories.

    Expects ``<root>/<image_id>/manifest.json`` with tensors named
    ``fm/<model>/<block>/<channel>`` as written by the exporters.
    """

    def __init__(self, root, model_name: str):
        self.root = Path(root)
        self.model_name = model_name
        self._blocks: int | None = None

    @property
    def num_blocks(self) -> int:
        if self._blocks is None:
            raise ValueError("block count unknown before the first image is read")
        return self._blocks

    def maps(self, image_id: str, image, block: int) -> np.ndarray:
        td = tensorio.TensorDir(self.root / image_id)
        prefix = f"fm/{self.model_name}/"
        blocks: dict[int, list[int]] = {}
        for name in td.names():
            if not name.startswith(prefix):
                continue
            b, ch = name[len(prefix) :].split("/")
            blocks.setdefault(int(b), []).append(int(ch))
        if not blocks:
            raise ValueError(f"no maps for model {self.model_name!r} under {td.root}")
        self._blocks = max(blocks)
        if block not in blocks:
            raise ValueError(f"block {block} missing for image {image_id!r}")
        chans = sorted(blocks[block])
        return np.stack([td.read(f"{prefix}{block}/{ch}") for ch in chans])


def as_source(obj, cfg: pda.OcclusionConfig | None = None):
    if isinstance(obj, micronet.ModelState):
        if cfg is None:
            raise ValueError("live model sources need an occlusion config")
        return ModelMaps(obj, cfg)
    return obj


# ---------------------------------------------------------------------------
# curves and dissection


@dataclass
class DissectItem:
    image_id: str
    gt: np.ndarray
    image: np.ndarray | None = None  # pixels; optional for directory sources


@dataclass
class ImageDissection:
    image_id: str
    curve: IoUCurve
    block: int


@dataclass
class DissectionResult:
    per_image: list[ImageDissection]
    forgetting_block: int

    def to_json(self) -> dict:
        return {
            "per_image": [
                {"id": d.image_id, "ious": [round(v, 6) for v in d.curve.ious], "b": d.block}
                for d in self.per_image
            ],
            "F": self.forgetting_block,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def _curve_for_item(
    item: DissectItem,
    src_old,
    src_new,
    k: int,
    policy: str,
    q: float | None,
    rm_cache: dict | None,
) -> IoUCurve:
    ious, rm_old, rm_new = [], [], []
    for block in range(1, k + 1):
        cache_key = (item.image_id, block)
        if rm_cache is not None and cache_key in rm_cache:
            idx_o, ref_mask = rm_cache[cache_key]
        else:
            maps_o = src_old.maps(item.image_id, item.image, block)
            idx_o, _ = representative_map(maps_o, item.gt, policy, q)
            ref_mask = pda.binarize(maps_o[idx_o], policy, q)
            if rm_cache is not None:
                rm_cache[cache_key] = (idx_o, ref_mask)
        maps_n = src_new.maps(item.image_id, item.image, block)
        idx_n, value = representative_map(maps_n, ref_mask, policy, q)
        rm_old.append(idx_o)
        rm_new.append(idx_n)
        ious.append(value)
    return IoUCurve(ious=ious, rm_old=rm_old, rm_new=rm_new)


def iou_curve(
    model_old: micronet.ModelState,
    model_new: micronet.ModelState,
    image: np.ndarray,
    gt: np.ndarray,
    cfg: pda.OcclusionConfig,
    policy: str = "positive",
    q: float | None = None,
) -> IoUCurve:
    """Per-block best new-vs-old IoU values for one image."""
    if model_old.arch != model_new.arch:
        raise ValueError("models must share architecture")
    item = DissectItem(image_id="_", gt=tensorio.validate_mask(gt), image=image)
    return _curve_for_item(
        item,
        ModelMaps(model_old, cfg),
        ModelMaps(model_new, cfg),
        model_old.num_blocks,
        policy,
        q,
        None,
    )


def mode_block(blocks) -> int:
    """Most frequent block; ties break toward the smallest index."""
    counts = Counter(blocks)
    return min(counts, key=lambda b: (-counts[b], b))


def dissect(
    items: list[DissectItem],
    src_old,
    src_new,
    k: int,
    cfg: pda.OcclusionConfig | None = None,
    policy: str = "positive",
    q: float | None = None,
    rm_cache: dict | None = None,
    parallel: int = 1,
) -> DissectionResult:
    """Run the per-image analysis over a probe set and vote on the block.

    ``src_old``/``src_new`` are ModelStates (with ``cfg``) or map sources.
    ``rm_cache`` optionally reuses old-model representatives across calls,
    keyed by (image_id, block).  ``parallel`` > 1 computes per-image curves
    on a thread pool; results merge by item index, so parallel and serial
    runs are identical.
    """
    if not items:
        raise ValueError("dissection needs at least one probe image")
    src_old = as_source(src_old, cfg)
    src_new = as_source(src_new, cfg)
    items = [
        DissectItem(image_id=i.image_id, gt=tensorio.validate_mask(i.gt), image=i.image)
        for i in items
    ]

    def one(item: DissectItem) -> ImageDissection:
        curve = _curve_for_item(item, src_old, src_new, k, policy, q, rm_cache)
        return ImageDissection(image_id=item.image_id, curve=curve, block=detect_drop(curve))

    if parallel > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=parallel) as pool:
            per_image = list(pool.map(one, items))
    else:
        per_image = [one(item) for item in items]
    return DissectionResult(
        per_image=per_image,
        forgetting_block=mode_block([d.block for d in per_image]),
    )


def items_from_samples(samples) -> list[DissectItem]:
    """Probe items from shapeworld samples (image pixels + exact masks)."""
    return [DissectItem(image_id=s.sid, gt=s.seg, image=s.image) for s in samples]
