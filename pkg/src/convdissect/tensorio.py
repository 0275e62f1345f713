"""Dense tensor values, reductions, and the on-disk interchange format.

Tensors are plain numpy arrays restricted to three dtypes: ``f32`` for
runtime values, ``f64`` for gradient-check mode, and ``u8`` for masks and
images.  A tensor directory holds one raw binary file per tensor (row-major,
little-endian, no header, no compression) plus a ``manifest.json`` that
declares name, dtype, shape and file for every entry.  The format is the
interchange surface shared with external map exporters, so writes must be
bit-reproducible.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

# interchange dtype tag -> explicit little-endian numpy dtype
DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
}

_KIND_TO_TAG = {dt.str: tag for tag, dt in DTYPES.items()}


class FormatError(ValueError):
    """Raised when a file or manifest violates the interchange format."""


def dtype_tag(arr: np.ndarray) -> str:
    """Return the interchange tag for an array's dtype, or reject it."""
    tag = _KIND_TO_TAG.get(arr.dtype.newbyteorder("<").str)
    if tag is None:
        raise FormatError(f"dtype {arr.dtype.name!r} is not representable (field: dtype)")
    return tag


def validate_tensor(arr: np.ndarray) -> np.ndarray:
    """Check dtype and return a C-contiguous view/copy of ``arr``."""
    dtype_tag(arr)
    return np.ascontiguousarray(arr)


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check that ``mask`` is a 2-D u8/bool array with values in {0, 1}."""
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype == np.bool_:
        mask = mask.astype(np.uint8)
    if mask.dtype != np.uint8:
        raise ValueError(f"mask dtype must be u8, got {mask.dtype.name}")
    bad = (mask > 1).sum()
    if bad:
        raise ValueError(f"mask has {bad} elements outside {{0, 1}}")
    return np.ascontiguousarray(mask)


def _tensor_file(name: str) -> str:
    return name + ".bin"


class TensorDir:
    """A directory of raw tensors indexed by ``manifest.json``.

    Entry names may contain ``/`` separators; they map onto subdirectories
    on disk.  Use the instance as a context manager when writing many
    tensors so the manifest is flushed once at the end.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self._entries: dict[str, dict] = {}
        self._autosave = True
        manifest = self.root / "manifest.json"
        if manifest.exists():
            self._load_manifest(manifest)

    def _load_manifest(self, path: Path) -> None:
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"unreadable manifest {path}: {e}") from e
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise FormatError(
                f"unsupported manifest version {version!r} (field: format_version)"
            )
        for entry in doc.get("tensors", []):
            for field in ("name", "dtype", "shape", "file"):
                if field not in entry:
                    raise FormatError(f"manifest entry missing field {field!r}")
            if entry["dtype"] not in DTYPES:
                raise FormatError(
                    f"tensor {entry['name']!r}: unknown dtype {entry['dtype']!r} (field: dtype)"
                )
            self._entries[entry["name"]] = entry

    def __enter__(self) -> "TensorDir":
        self._autosave = False
        return self

    def __exit__(self, *exc) -> None:
        self._autosave = True
        self.save_manifest()

    def names(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def save_manifest(self) -> None:
        doc = {
            "format_version": FORMAT_VERSION,
            "tensors": [self._entries[n] for n in sorted(self._entries)],
        }
        self.root.mkdir(parents=True, exist_ok=True)
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        (self.root / "manifest.json").write_text(text)

    def write(self, name: str, arr: np.ndarray) -> dict:
        """Write ``arr`` under ``name`` and return its manifest entry."""
        arr = validate_tensor(arr)
        entry = {
            "name": name,
            "dtype": dtype_tag(arr),
            "shape": [int(s) for s in arr.shape],
            "file": _tensor_file(name),
            "layout": "row-major",
            "byte_order": "little-endian",
        }
        path = self.root / entry["file"]
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(arr.astype(DTYPES[entry["dtype"]], copy=False).tobytes())
        self._entries[name] = entry
        if self._autosave:
            self.save_manifest()
        return entry

    def read(self, name: str) -> np.ndarray:
        """Read the tensor declared under ``name`` back into memory."""
        entry = self._entries.get(name)
        if entry is None:
            raise FormatError(f"tensor {name!r} is not declared in the manifest (field: name)")
        path = self.root / entry["file"]
        if not path.exists():
            raise FormatError(f"tensor {name!r}: missing file {entry['file']!r} (field: file)")
        raw = path.read_bytes()
        dtype = DTYPES[entry["dtype"]]
        shape = tuple(int(s) for s in entry["shape"])
        expected = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        if len(raw) != expected:
            raise FormatError(
                f"tensor {name!r}: file holds {len(raw)} bytes, "
                f"manifest declares {expected} (field: shape)"
            )
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def write_tensor(arr: np.ndarray, root: str | os.PathLike, name: str) -> dict:
    """Write one tensor into the directory ``root`` under ``name``."""
    return TensorDir(root).write(name, arr)


def read_tensor(root: str | os.PathLike, name: str) -> np.ndarray:
    """Read one tensor named by the manifest of directory ``root``."""
    return TensorDir(root).read(name)


def reduce(t: np.ndarray, op: str, axes: int | tuple[int, ...] | None = None) -> np.ndarray:
    """Reduce ``t`` with ``sum``, ``mean`` or ``max`` over ``axes``.

    ``axes=None`` reduces over every axis.  Sums and means of u8 tensors
    accumulate in 64-bit so they stay exact within integer range.
    """
    validate_tensor(t)
    if axes is None:
        axes = tuple(range(t.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(axes)
    seen = set()
    for ax in axes:
        if not -t.ndim <= ax < t.ndim:
            raise ValueError(f"axis {ax} out of range for {t.ndim}-D tensor")
        if ax % t.ndim in seen:
            raise ValueError(f"axis {ax} repeated")
        seen.add(ax % t.ndim)

    if op == "sum":
        if t.dtype == np.uint8:
            return np.sum(t, axis=axes, dtype=np.int64)
        return np.sum(t, axis=axes)
    if op == "mean":
        if t.dtype == np.uint8:
            return np.mean(t, axis=axes, dtype=np.float64)
        return np.mean(t, axis=axes)
    if op == "max":
        return np.max(t, axis=axes)
    raise ValueError(f"unknown reduction {op!r}")
