"""Deterministic synthetic shape dataset with pixel-exact segmentation masks.

Six shape classes are rendered onto textured backgrounds at 64x64.  Every
sample is generated from its own RNG substream ``(seed, class, index)`` so
datasets are reproducible bit-for-bit and generation could be parallelized
per sample without changing results.

Rasterization rule: a pixel is foreground iff at least 2 of its 4 subpixel
centers (offsets 0.25 and 0.75 in each axis) lie inside the analytic shape.
This equals rasterizing the shape on a double-resolution grid and
downsampling by coverage >= 0.5, which is what the test oracle does
independently.

Analytic shape definitions, all centered at (cx, cy) with size ``s``:

- circle:   (x-cx)^2 + (y-cy)^2 <= (s/2)^2
- square:   max(|x-cx|, |y-cy|) <= s/2
- triangle: isoceles, apex up; vertices (cx, cy-s/2), (cx-s/2, cy+s/2),
            (cx+s/2, cy+s/2); inside by half-plane tests
- cross:    (|x-cx| <= s/2 and |y-cy| <= s/6) or the transpose
- ring:     (0.55*s/2)^2 <= (x-cx)^2 + (y-cy)^2 <= (s/2)^2
- star:     10-vertex polygon, angles -pi/2 + k*pi/5, radii alternating
            s/2 and s/4; inside by even-odd ray casting
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio

IMAGE_HW = 64
CLASSES = ("circle", "square", "triangle", "cross", "ring", "star")

MIN_SIZE = 10
MAX_SIZE = 28
MIN_FOREGROUND = 30
MAX_FOREGROUND = 3000


@dataclass(frozen=True)
class ShapeParams:
    """Geometry and colors drawn for one sample, in draw order."""

    size: int
    cy: float
    cx: float
    fg: tuple[int, int, int]
    bg0: tuple[int, int, int]
    bg1: tuple[int, int, int]
    mix: float  # horizontal/vertical blend of the background gradient


@dataclass
class Sample:
    sid: str
    label: int
    image: np.ndarray  # u8 [3, 64, 64]
    seg: np.ndarray  # u8 [64, 64]


NOISE_SIGMA = 6.0
BG_MAX = 100  # background gradient colors stay below this
FG_MIN = 140  # solid foreground colors stay above this


def draw_params(rng: np.random.Generator) -> ShapeParams:
    """Draw sample geometry/colors; the draw order is part of the contract."""
    size = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
    margin = size / 2 + 1.0
    cy = float(rng.uniform(margin, IMAGE_HW - margin))
    cx = float(rng.uniform(margin, IMAGE_HW - margin))
    fg = tuple(int(v) for v in rng.integers(FG_MIN, 256, size=3))
    bg0 = tuple(int(v) for v in rng.integers(0, BG_MAX + 1, size=3))
    bg1 = tuple(int(v) for v in rng.integers(0, BG_MAX + 1, size=3))
    mix = float(rng.uniform())
    return ShapeParams(size=size, cy=cy, cx=cx, fg=fg, bg0=bg0, bg1=bg1, mix=mix)


def _points_in_polygon(px: np.ndarray, py: np.ndarray, verts) -> np.ndarray:
    """Even-odd ray-casting test for arbitrary simple polygons."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        denom = (y2 - y1) if y2 != y1 else 1.0
        xint = (x2 - x1) * (py - y1) / denom + x1
        inside ^= crosses & (px < xint)
    return inside


def shape_inside(name: str, params: ShapeParams, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Vectorized point-in-shape predicate at continuous coordinates."""
    s, cy, cx = params.size, params.cy, params.cx
    dx, dy = px - cx, py - cy
    half = s / 2
    if name == "circle":
        return dx * dx + dy * dy <= half * half
    if name == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= half
    if name == "triangle":
        ax, ay = cx, cy - half
        bx, by = cx - half, cy + half
        qx, qy = cx + half, cy + half
        d1 = (px - bx) * (ay - by) - (py - by) * (ax - bx)
        d2 = (px - qx) * (by - qy) - (py - qy) * (bx - qx)
        d3 = (px - ax) * (qy - ay) - (py - ay) * (qx - ax)
        return ((d1 <= 0) & (d2 <= 0) & (d3 <= 0)) | ((d1 >= 0) & (d2 >= 0) & (d3 >= 0))
    if name == "cross":
        arm = s / 6
        horiz = (np.abs(dx) <= half) & (np.abs(dy) <= arm)
        vert = (np.abs(dy) <= half) & (np.abs(dx) <= arm)
        return horiz | vert
    if name == "ring":
        rr = dx * dx + dy * dy
        inner = 0.55 * half
        return (rr <= half * half) & (rr >= inner * inner)
    if name == "star":
        verts = []
        for k in range(10):
            ang = -np.pi / 2 + k * np.pi / 5
            rad = half if k % 2 == 0 else half / 2
            verts.append((cx + rad * np.cos(ang), cy + rad * np.sin(ang)))
        return _points_in_polygon(px, py, verts)
    raise ValueError(f"unknown shape {name!r}")


def rasterize(name: str, params: ShapeParams) -> np.ndarray:
    """Exact u8 mask under the double-resolution coverage rule."""
    sub = (np.arange(2 * IMAGE_HW) + 0.5) / 2.0
    px, py = np.meshgrid(sub, sub, indexing="xy")
    inside = shape_inside(name, params, px, py)
    cover = inside.reshape(IMAGE_HW, 2, IMAGE_HW, 2).sum(axis=(1, 3))
    return (cover >= 2).astype(np.uint8)


def render(name: str, params: ShapeParams, rng: np.random.Generator):
    """Render (image, seg) for one sample; the seg mask is the exact coverage."""
    seg = rasterize(name, params)
    yy, xx = np.meshgrid(np.arange(IMAGE_HW), np.arange(IMAGE_HW), indexing="ij")
    t = (params.mix * xx + (1 - params.mix) * yy) / (IMAGE_HW - 1)
    img = np.empty((3, IMAGE_HW, IMAGE_HW), dtype=np.float64)
    for c in range(3):
        img[c] = params.bg0[c] + t * (params.bg1[c] - params.bg0[c])
    img += rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    fg = np.array(params.fg, dtype=np.float64)[:, None, None]
    img = np.where(seg[None].astype(bool), fg, img)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), seg


def gen_sample(seed: int, label: int, index: int) -> Sample:
    rng = np.random.default_rng([seed, label, index])
    params = draw_params(rng)
    name = CLASSES[label]
    image, seg = render(name, params, rng)
    count = int(seg.sum())
    if not MIN_FOREGROUND <= count <= MAX_FOREGROUND:
        raise AssertionError(f"{name} sample with {count} foreground pixels")
    return Sample(sid=f"{name}_{index:04d}", label=label, image=image, seg=seg)


def gen_dataset(seed: int, per_class: int) -> list[Sample]:
    """Generate ``per_class`` samples for each of the six classes."""
    if per_class < 10:
        raise ValueError("per_class must be >= 10")
    return [
        gen_sample(seed, label, idx)
        for label in range(len(CLASSES))
        for idx in range(per_class)
    ]


def channel_means(samples) -> tuple[float, float, float]:
    """Per-channel mean of the images scaled to [0, 1]."""
    acc = np.zeros(3, dtype=np.float64)
    for s in samples:
        acc += s.image.mean(axis=(1, 2))
    acc /= len(samples) * 255.0
    return tuple(float(v) for v in acc)


def to_input(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    """u8 image -> float input in [0, 1]."""
    if image.dtype == np.uint8:
        return image.astype(dtype) / 255.0
    return image.astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# class-incremental task streams


@dataclass
class Task:
    classes: tuple[int, ...]
    train: list[Sample]
    test: list[Sample]


@dataclass
class TaskStream:
    tasks: list[Task]

    def seen_classes(self, upto: int) -> tuple[int, ...]:
        out: list[int] = []
        for task in self.tasks[: upto + 1]:
            out.extend(task.classes)
        return tuple(out)


def make_stream(
    samples: list[Sample],
    base_classes: int,
    increment_sizes,
    train_frac: float = 0.75,
) -> TaskStream:
    """Split the dataset into a base task plus class-disjoint increments.

    Classes are assigned in label order: the first ``base_classes`` labels
    form task 0, then each increment takes the next labels.  Within a class
    the first ``train_frac`` of samples (by index) are the train split.
    """
    labels = sorted({s.label for s in samples})
    sizes = [base_classes] + list(increment_sizes)
    if any(sz < 1 for sz in sizes):
        raise ValueError("task sizes must be >= 1")
    if sum(sizes) > len(labels):
        raise ValueError(f"stream needs {sum(sizes)} classes, dataset has {len(labels)}")
    by_label: dict[int, list[Sample]] = {lb: [] for lb in labels}
    for s in samples:
        by_label[s.label].append(s)

    tasks = []
    cursor = 0
    for sz in sizes:
        cls = tuple(labels[cursor : cursor + sz])
        cursor += sz
        train: list[Sample] = []
        test: list[Sample] = []
        for lb in cls:
            group = by_label[lb]
            cut = int(round(train_frac * len(group)))
            train.extend(group[:cut])
            test.extend(group[cut:])
        tasks.append(Task(classes=cls, train=train, test=test))
    return TaskStream(tasks=tasks)


def sample_set(task: Task, count: int) -> list[Sample]:
    """Pick ``count`` held-out probe images from a task, balanced per class."""
    per_class: dict[int, list[Sample]] = {}
    for s in task.test:
        per_class.setdefault(s.label, []).append(s)
    picked: list[Sample] = []
    idx = 0
    while len(picked) < count:
        progressed = False
        for lb in sorted(per_class):
            group = per_class[lb]
            if idx < len(group) and len(picked) < count:
                picked.append(group[idx])
                progressed = True
        if not progressed:
            raise ValueError(f"task has only {len(picked)} test samples, need {count}")
        idx += 1
    return picked


# ---------------------------------------------------------------------------
# on-disk form: interchange tensors + JSON index


def save_dataset(samples: list[Sample], root) -> None:
    root = Path(root)
    index = {}
    with tensorio.TensorDir(root) as td:
        for s in samples:
            td.write(f"img/{s.sid}", s.image)
            td.write(f"seg/{s.sid}", s.seg)
            index[s.sid] = {
                "label": s.label,
                "files": {"image": f"img/{s.sid}", "seg": f"seg/{s.sid}"},
            }
    doc = {"classes": list(CLASSES), "samples": index}
    (root / "index.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    doc = json.loads((root / "index.json").read_text())
    td = tensorio.TensorDir(root)
    samples = []
    for sid, info in doc["samples"].items():
        samples.append(
            Sample(
                sid=sid,
                label=int(info["label"]),
                image=td.read(info["files"]["image"]),
                seg=tensorio.validate_mask(td.read(info["files"]["seg"])),
            )
        )
    samples.sort(key=lambda s: (s.label, s.sid))
    return samples
