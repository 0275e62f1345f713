"""Export occlusion difference maps for a persisted analyzer model.

Flags mirror the analyzer's ``pda`` subcommand: the same window, stride,
replacement and aggregation semantics, the same dataset directory layout
(interchange tensors plus ``index.json``), and the same output layout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import interchange, models, sweep


def dataset_channel_means(data_dir: Path, index: dict) -> tuple[float, ...]:
    """Per-channel mean of all dataset images scaled to [0, 1].

    Matches the analyzer's definition so dataset-mean sweeps are comparable.
    """
    acc = None
    count = 0
    for sid in index:
        img = _read_tensor(data_dir, index[sid]["files"]["image"])
        part = img.mean(axis=(1, 2))
        acc = part if acc is None else acc + part
        count += 1
    return tuple(float(v) for v in acc / (count * 255.0))


def _read_tensor(root: Path, name: str) -> np.ndarray:
    doc = json.loads((root / "manifest.json").read_text())
    for entry in doc["tensors"]:
        if entry["name"] == name:
            raw = (root / entry["file"]).read_bytes()
            dtype = interchange.DTYPES[entry["dtype"]]
            return np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    raise ValueError(f"tensor {name!r} not found under {root}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occlusion-export", description=__doc__)
    p.add_argument("--model", required=True, help="analyzer model manifest directory")
    p.add_argument("--data", required=True, help="dataset directory (interchange + index.json)")
    p.add_argument("--image-id", action="append", help="repeatable; defaults to every sample")
    p.add_argument("--model-name", default="micronet")
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--replacement", choices=sweep.REPLACEMENTS, default="dataset-mean")
    p.add_argument("--aggregation", choices=sweep.AGGREGATIONS, default="spatial-mean")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        model, _ = models.load_model_manifest(args.model)
        data_dir = Path(args.data)
        index = json.loads((data_dir / "index.json").read_text())["samples"]
        ids = args.image_id or sorted(index)
        missing = [i for i in ids if i not in index]
        if missing:
            raise ValueError(f"image ids not in dataset: {missing}")

        means = None
        if args.replacement == "dataset-mean":
            means = dataset_channel_means(data_dir, index)
        spec = sweep.OcclusionSpec(
            window=args.window,
            stride=args.stride,
            replacement=args.replacement,
            aggregation=args.aggregation,
            channel_means=means,
            batch=args.batch,
        )
        items = []
        for sid in ids:
            files = index[sid]["files"]
            items.append(
                sweep.ExportItem(
                    image_id=sid,
                    image=_read_tensor(data_dir, files["image"]),
                    mask=_read_tensor(data_dir, files["seg"]),
                )
            )
        job = sweep.ExportJob(
            model=model,
            block_layers=models.default_block_layers(model),
            items=items,
            occlusion=spec,
            out_dir=Path(args.out),
            model_name=args.model_name,
        )
        result = sweep.export_maps(job)
    except (ValueError, FileNotFoundError, KeyError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    for sid, message in result.errors:
        sys.stderr.write(f"item {sid}: {message}\n")
    print(f"exported {len(result.written)} images to {args.out}")
    return 0 if not result.errors else 1


if __name__ == "__main__":
    sys.exit(main())
