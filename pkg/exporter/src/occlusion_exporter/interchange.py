"""Minimal reader/writer for the analyzer's tensor interchange format.

A directory holds ``manifest.json`` declaring {name, dtype, shape, file,
layout, byte_order} per tensor plus one raw little-endian row-major binary
file per tensor.  This module is intentionally self-contained: the format
is the contract between the exporter and the analyzer, not a shared
library.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
}
_TAGS = {dt.str: tag for tag, dt in DTYPES.items()}


def _tag_for(arr: np.ndarray) -> str:
    tag = _TAGS.get(arr.dtype.newbyteorder("<").str)
    if tag is None:
        raise ValueError(f"dtype {arr.dtype.name!r} not supported by the interchange format")
    return tag


def write_dir(root: str | Path, tensors: dict[str, np.ndarray]) -> Path:
    """Write all tensors plus a manifest; returns the directory path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        tag = _tag_for(arr)
        rel = name + ".bin"
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(arr.astype(DTYPES[tag], copy=False).tobytes())
        entries.append(
            {
                "name": name,
                "dtype": tag,
                "shape": [int(s) for s in arr.shape],
                "file": rel,
                "layout": "row-major",
                "byte_order": "little-endian",
            }
        )
    doc = {"format_version": FORMAT_VERSION, "tensors": entries}
    (root / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return root


def read_dir(root: str | Path) -> dict[str, np.ndarray]:
    """Load every tensor declared by a manifest directory."""
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported interchange version {doc.get('format_version')!r}")
    out = {}
    for entry in doc["tensors"]:
        dtype = DTYPES[entry["dtype"]]
        raw = (root / entry["file"]).read_bytes()
        out[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return out
